//! Contribution-ranked vector quantization of SH colors, half-precision
//! storage, and the `SCV2` checkpoint format.

use std::fs;
use std::path::Path;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::io::{write_ply_points, PointCloud};
use crate::math::{Quat, Vec3};
use crate::scalar::Real;
use crate::splat::{SceneModel, Surfel, SH_C0, SH_LEN};

pub const MAGIC: [u8; 4] = *b"SCV2";
pub const VERSION: u32 = 1;
pub const KMEANS_ITERS: usize = 25;

const KIND_FLOAT: u32 = 0;
const KIND_QUANTIZED: u32 = 1;
/// Geometry scalars per surfel: center, rotation, log scales, opacity logit.
const GEOM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizeConfig {
    pub ratio: f64,
    pub codebook_size: usize,
    pub seed: u64,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            codebook_size: 8192,
            seed: 0,
        }
    }
}

/// Head surfels keep every attribute in binary16; tail surfels keep
/// geometry in binary16 and index a shared SH codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub ratio: f64,
    pub requested_k: usize,
    pub seed: u64,
    pub iteration: u64,
    pub background: [f32; 3],
    /// Per surfel, original order.
    pub geometry: Vec<[f16; GEOM]>,
    pub is_tail: Vec<bool>,
    /// SH of head surfels, in order of appearance.
    pub head_sh: Vec<[f16; SH_LEN]>,
    /// Codebook index of tail surfels, in order of appearance.
    pub tail_index: Vec<u32>,
    pub codebook: Vec<[f16; SH_LEN]>,
}

impl QuantizedModel {
    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub fn head_count(&self) -> usize {
        self.head_sh.len()
    }

    pub fn tail_count(&self) -> usize {
        self.tail_index.len()
    }

    /// Effective codebook size (after clamping).
    pub fn k(&self) -> usize {
        self.codebook.len()
    }

    fn index_width(&self) -> usize {
        if self.k() <= 1 << 16 {
            2
        } else {
            4
        }
    }
}

fn geometry_of<T: Real>(s: &Surfel<T>) -> [f64; GEOM] {
    let q = s.rotation.to_array();
    [
        s.center.x.f64(),
        s.center.y.f64(),
        s.center.z.f64(),
        q[0].f64(),
        q[1].f64(),
        q[2].f64(),
        q[3].f64(),
        s.log_scales[0].f64(),
        s.log_scales[1].f64(),
        s.opacity_logit.f64(),
    ]
}

fn surfel_from(g: &[f64; GEOM], sh: &[f64; SH_LEN]) -> Surfel<f32> {
    Surfel {
        center: Vec3::new(g[0] as f32, g[1] as f32, g[2] as f32),
        rotation: Quat::new(g[3] as f32, g[4] as f32, g[5] as f32, g[6] as f32),
        log_scales: [g[7] as f32, g[8] as f32],
        opacity_logit: g[9] as f32,
        sh: sh.map(|v| v as f32),
    }
}

fn to_half<const N: usize>(v: [f64; N]) -> [f16; N] {
    v.map(f16::from_f64)
}

fn sq_dist(a: &[f64; SH_LEN], b: &[f64; SH_LEN]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(v: &[f64; SH_LEN], centroids: &[[f64; SH_LEN]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(v, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Result of [`kmeans`]: centroids, assignment, and the objective after
/// every iteration (non-increasing).
#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Vec<[f64; SH_LEN]>,
    pub assignment: Vec<usize>,
    pub objective: Vec<f64>,
}

/// k-means++ seeding followed by at most `iters` Lloyd iterations; stops
/// early once assignments are stable. Empty clusters keep their centroid.
pub fn kmeans(data: &[[f64; SH_LEN]], k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if data.is_empty() || k == 0 || k > data.len() {
        return contract(format!("k-means needs 1 ≤ k ≤ n, got k={k}, n={}", data.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![data[rng.gen_range(0..data.len())]];
    let mut d2: Vec<f64> = data.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // Every point already coincides with a centroid.
            0
        };
        let c = data[pick];
        for (d, v) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(v, &c));
        }
        centroids.push(c);
    }

    let mut assignment = vec![usize::MAX; data.len()];
    let mut objective = Vec::new();
    for _ in 0..iters.max(1) {
        let next: Vec<(usize, f64)> = data.par_iter().map(|v| nearest(v, &centroids)).collect();
        let changed = next.iter().zip(&assignment).any(|(n, a)| n.0 != *a);
        assignment = next.iter().map(|n| n.0).collect();
        // Ordered reduction keeps the result independent of thread count.
        let mut sums = vec![[0.0; SH_LEN]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in data.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                *c = s.map(|x| x / n as f64);
            }
        }
        let obj: f64 = data.iter().zip(&assignment).map(|(v, &a)| sq_dist(v, &centroids[a])).sum();
        if let Some(&prev) = objective.last() {
            assert!(obj <= prev * (1.0 + 1e-12) + 1e-300, "k-means objective increased: {prev} → {obj}");
        }
        objective.push(obj);
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignment,
        objective,
    })
}

/// Sends the lowest-contribution `ratio` fraction (nearest rank) to the tail
/// and replaces their SH with a learned codebook entry.
pub fn quantize<T: Real>(model: &SceneModel<T>, contributions: &[f64], cfg: &QuantizeConfig) -> Result<QuantizedModel> {
    if !(0.0..1.0).contains(&cfg.ratio) {
        return contract(format!("quantization ratio must lie in [0,1), got {}", cfg.ratio));
    }
    if cfg.codebook_size == 0 {
        return contract("codebook size must be ≥ 1");
    }
    if contributions.len() != model.len() {
        return contract(format!("{} contributions for {} surfels", contributions.len(), model.len()));
    }
    let n = model.len();
    let n_tail = (cfg.ratio * n as f64).ceil() as usize;
    // Stable rank: ties broken by index so membership is deterministic.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| contributions[a].total_cmp(&contributions[b]).then(a.cmp(&b)));
    let mut is_tail = vec![false; n];
    for &i in &order[..n_tail] {
        is_tail[i] = true;
    }

    let tail_sh: Vec<[f64; SH_LEN]> = (0..n).filter(|&i| is_tail[i]).map(|i| model.surfels[i].sh.map(|v| v.f64())).collect();
    let (codebook, tail_index) = if tail_sh.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let k = cfg.codebook_size.min(tail_sh.len());
        if k < cfg.codebook_size {
            log::warn!("codebook size {} exceeds tail count {}; clamped to {k}", cfg.codebook_size, tail_sh.len());
        }
        let km = kmeans(&tail_sh, k, KMEANS_ITERS, cfg.seed)?;
        let mut book: Vec<[f16; SH_LEN]> = km.centroids.iter().map(|c| to_half(*c)).collect();
        // Canonical order, so re-quantizing a dequantized model is a fixed point.
        book.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        // Final assignment against the stored (rounded) entries.
        let rounded: Vec<[f64; SH_LEN]> = book.iter().map(|c| c.map(f16::to_f64)).collect();
        let idx = tail_sh.par_iter().map(|v| nearest(v, &rounded).0 as u32).collect();
        (book, idx)
    };

    Ok(QuantizedModel {
        ratio: cfg.ratio,
        requested_k: cfg.codebook_size,
        seed: cfg.seed,
        iteration: model.iteration,
        background: model.background.to_array().map(|v| v.f64() as f32),
        geometry: model.surfels.iter().map(|s| to_half(geometry_of(s))).collect(),
        head_sh: (0..n).filter(|&i| !is_tail[i]).map(|i| to_half(model.surfels[i].sh.map(|v| v.f64()))).collect(),
        is_tail,
        tail_index,
        codebook,
    })
}

pub fn dequantize(q: &QuantizedModel) -> Result<SceneModel<f32>> {
    let n = q.len();
    let n_tail = q.is_tail.iter().filter(|t| **t).count();
    if q.is_tail.len() != n || n_tail != q.tail_index.len() || n - n_tail != q.head_sh.len() {
        return Err(Error::Format("quantized model section sizes disagree".into()));
    }
    let (mut h, mut t) = (0, 0);
    let mut surfels = Vec::with_capacity(n);
    for i in 0..n {
        let g = q.geometry[i].map(f16::to_f64);
        let sh = if q.is_tail[i] {
            let idx = q.tail_index[t];
            if idx as usize >= q.k() {
                return Err(Error::CorruptIndex {
                    index: idx,
                    offset: t * q.index_width(),
                    size: q.k(),
                });
            }
            t += 1;
            q.codebook[idx as usize]
        } else {
            h += 1;
            q.head_sh[h - 1]
        };
        surfels.push(surfel_from(&g, &sh.map(f16::to_f64)));
    }
    let mut m = SceneModel::new(surfels, Vec3::from_array(q.background));
    m.iteration = q.iteration;
    Ok(m)
}

// --- checkpoint encoding ---------------------------------------------------

struct Writer(Vec<u8>);

impl Writer {
    fn header(kind: u32) -> Self {
        let mut w = Self(Vec::new());
        w.0.extend_from_slice(&MAGIC);
        w.u32(VERSION);
        w.u32(kind);
        w
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f16(&mut self, v: f16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.u32(crc);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("checkpoint section ends early at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f16(&mut self) -> Result<f16> {
        Ok(f16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn count(&mut self, what: &str, elem_bytes: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem_bytes) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("{what} count {n} exceeds the file size")));
        }
        Ok(n)
    }
}

/// Verifies magic, version and CRC; returns the kind and a reader positioned
/// after the header.
fn open(bytes: &[u8]) -> Result<(u32, Reader<'_>)> {
    if bytes.len() < 4 {
        return Err(Error::Format("checkpoint shorter than its magic".into()));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < 16 {
        return Err(Error::Crc {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let kind = r.u32()?;
    Ok((kind, r))
}

/// Float32 checkpoint bytes; `f64` models are rounded to `f32`.
pub fn encode_model<T: Real>(model: &SceneModel<T>) -> Vec<u8> {
    let mut w = Writer::header(KIND_FLOAT);
    w.u64(model.iteration);
    for v in model.background.to_array() {
        w.f32(v.f64() as f32);
    }
    w.u64(model.len() as u64);
    for s in &model.surfels {
        for v in geometry_of(s) {
            w.f32(v as f32);
        }
        for v in s.sh {
            w.f32(v.f64() as f32);
        }
    }
    w.finish()
}

pub fn decode_model(bytes: &[u8]) -> Result<SceneModel<f32>> {
    let (kind, mut r) = open(bytes)?;
    if kind != KIND_FLOAT {
        return Err(Error::Format(format!("expected a float checkpoint, found kind {kind}")));
    }
    let iteration = r.u64()?;
    let bg = Vec3::new(r.f32()?, r.f32()?, r.f32()?);
    let n = r.count("surfel", (GEOM + SH_LEN) * 4)?;
    let mut surfels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut g = [0.0; GEOM];
        for v in &mut g {
            *v = r.f32()? as f64;
        }
        let mut sh = [0.0; SH_LEN];
        for v in &mut sh {
            *v = r.f32()? as f64;
        }
        surfels.push(surfel_from(&g, &sh));
    }
    trailing(&r)?;
    let mut m = SceneModel::new(surfels, bg);
    m.iteration = iteration;
    Ok(m)
}

fn trailing(r: &Reader<'_>) -> Result<()> {
    if r.pos != r.buf.len() {
        return Err(Error::Format(format!("{} unexpected trailing bytes", r.buf.len() - r.pos)));
    }
    Ok(())
}

pub fn encode_quantized(q: &QuantizedModel) -> Vec<u8> {
    let mut w = Writer::header(KIND_QUANTIZED);
    w.u64(q.iteration);
    for v in q.background {
        w.f32(v);
    }
    w.f64(q.ratio);
    w.u64(q.requested_k as u64);
    w.u64(q.seed);
    w.0.push(q.index_width() as u8);
    w.u64(q.len() as u64);
    for g in &q.geometry {
        for v in g {
            w.f16(*v);
        }
    }
    let mut bits = vec![0u8; q.len().div_ceil(8)];
    for (i, _) in q.is_tail.iter().enumerate().filter(|(_, t)| **t) {
        bits[i / 8] |= 1 << (i % 8);
    }
    w.0.extend_from_slice(&bits);
    for sh in &q.head_sh {
        for v in sh {
            w.f16(*v);
        }
    }
    w.u64(q.k() as u64);
    for c in &q.codebook {
        for v in c {
            w.f16(*v);
        }
    }
    for &i in &q.tail_index {
        match q.index_width() {
            2 => w.0.extend_from_slice(&(i as u16).to_le_bytes()),
            _ => w.u32(i),
        }
    }
    w.finish()
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedModel> {
    let (kind, mut r) = open(bytes)?;
    if kind != KIND_QUANTIZED {
        return Err(Error::Format(format!("expected a quantized checkpoint, found kind {kind}")));
    }
    let iteration = r.u64()?;
    let background = [r.f32()?, r.f32()?, r.f32()?];
    let ratio = r.f64()?;
    let requested_k = r.u64()? as usize;
    let seed = r.u64()?;
    let width = r.u8()? as usize;
    if width != 2 && width != 4 {
        return Err(Error::Format(format!("index width {width} is not 2 or 4")));
    }
    let n = r.count("surfel", GEOM * 2)?;
    let mut geometry = Vec::with_capacity(n);
    for _ in 0..n {
        let mut g = [f16::ZERO; GEOM];
        for v in &mut g {
            *v = r.f16()?;
        }
        geometry.push(g);
    }
    let bits = r.take(n.div_ceil(8))?;
    let is_tail: Vec<bool> = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    let n_tail = is_tail.iter().filter(|t| **t).count();
    let mut head_sh = Vec::with_capacity(n - n_tail);
    for _ in 0..n - n_tail {
        let mut sh = [f16::ZERO; SH_LEN];
        for v in &mut sh {
            *v = r.f16()?;
        }
        head_sh.push(sh);
    }
    let k = r.count("codebook", SH_LEN * 2)?;
    let mut codebook = Vec::with_capacity(k);
    for _ in 0..k {
        let mut c = [f16::ZERO; SH_LEN];
        for v in &mut c {
            *v = r.f16()?;
        }
        codebook.push(c);
    }
    let mut tail_index = Vec::with_capacity(n_tail);
    for _ in 0..n_tail {
        let offset = r.pos;
        let i = if width == 2 { r.u16()? as u32 } else { r.u32()? };
        if i as usize >= k {
            return Err(Error::CorruptIndex { index: i, offset, size: k });
        }
        tail_index.push(i);
    }
    trailing(&r)?;
    Ok(QuantizedModel {
        ratio,
        requested_k,
        seed,
        iteration,
        background,
        geometry,
        is_tail,
        head_sh,
        tail_index,
        codebook,
    })
}

pub fn save_model<T: Real>(model: &SceneModel<T>, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_model(model))?)
}

pub fn load_model(path: &Path) -> Result<SceneModel<f32>> {
    decode_model(&fs::read(path)?)
}

pub fn save_quantized(q: &QuantizedModel, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_quantized(q))?)
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    decode_quantized(&fs::read(path)?)
}

/// Loads either checkpoint kind, dequantizing if needed.
pub fn load_any(path: &Path) -> Result<SceneModel<f32>> {
    let bytes = fs::read(path)?;
    let (kind, _) = open(&bytes)?;
    match kind {
        KIND_QUANTIZED => dequantize(&decode_quantized(&bytes)?),
        _ => decode_model(&bytes),
    }
}

/// Surfel centers with world normals and view-independent (DC) color.
pub fn export_ply<T: Real>(model: &SceneModel<T>, path: &Path) -> Result<()> {
    let mut cloud = PointCloud {
        points: Vec::with_capacity(model.len()),
        colors: Some(Vec::with_capacity(model.len())),
        normals: Some(Vec::with_capacity(model.len())),
    };
    for s in &model.surfels {
        cloud.points.push(s.center.cast());
        cloud.normals.as_mut().unwrap().push(s.raw_normal().normalized().cast());
        let dc = Vec3::new(s.sh[0], s.sh[1], s.sh[2]).scale(T::of(SH_C0)) + Vec3::splat(T::of(0.5));
        cloud.colors.as_mut().unwrap().push(dc.cast::<f64>().max_elem(Vec3::zero()).min_elem(Vec3::splat(1.0)));
    }
    write_ply_points(path, &cloud)
}
