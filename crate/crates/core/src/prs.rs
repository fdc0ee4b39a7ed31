//! Per-patch distribution store and prompted representation sampling.
//!
//! Binary layout (little-endian): magic `PRSD`, version `u32`, `D u32`,
//! `K u32`, the mask matrix as `K x D` `f32`, `bag_count u32`, then per bag
//! `id_len u16`, UTF-8 id, `label u32`, `patch_count u32` and for each patch
//! `D` means followed by `D` standard deviations as `f32`. A CRC32 of all
//! preceding bytes closes the file.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{Prompt, ToyImage, NUM_OPERATORS};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::Reader;
use crate::model::{estimate_distributions, standard_normal_vec, PrdlModel};

pub const STORE_MAGIC: &[u8; 4] = b"PRSD";
pub const STORE_VERSION: u32 = 1;

/// Which standard deviation scales the sampling noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sigma ⊙ m_p` for the sampled prompt.
    #[default]
    Prompted,
    /// The stored `sigma`, ignoring the prompt.
    Literal,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreConfig {
    pub sigma_mode: SigmaMode,
}

/// One bag: `patch_count x D` means and standard deviations, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BagRecord {
    pub id: String,
    pub label: u32,
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl BagRecord {
    pub fn patch_count(&self, dim: usize) -> usize {
        self.mu.len() / dim
    }
}

/// Patch images of one bag with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct BagImages {
    pub id: String,
    pub label: u32,
    pub patches: Vec<ToyImage>,
}

#[derive(Clone, Debug)]
pub struct PrsStore {
    dim: usize,
    /// `K x D`, entries in `(0, 1)`.
    mask: Vec<f32>,
    bags: Vec<BagRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for PrsStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.mask == other.mask && self.bags == other.bags
    }
}

/// Largest `f32` below 1, so rounded masks stay inside the open interval.
const MASK_CEIL: f32 = 1.0 - f32::EPSILON / 2.0;

impl PrsStore {
    pub fn new(dim: usize, mask: Vec<f32>, bags: Vec<BagRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("store dimension must be positive"));
        }
        if mask.len() != NUM_OPERATORS * dim {
            return Err(Error::Dimension {
                expected: NUM_OPERATORS * dim,
                found: mask.len(),
            });
        }
        if let Some(m) = mask.iter().find(|m| !(**m > 0.0 && **m < 1.0)) {
            return Err(Error::invalid(format!("mask entry {m} outside (0, 1)")));
        }
        let mut index = HashMap::with_capacity(bags.len());
        for (i, b) in bags.iter().enumerate() {
            if b.id.len() > u16::MAX as usize {
                return Err(Error::invalid(format!("bag id longer than {} bytes", u16::MAX)));
            }
            if b.mu.is_empty() || b.mu.len() % dim != 0 || b.sigma.len() != b.mu.len() {
                return Err(Error::invalid(format!(
                    "bag {}: records must be non-empty multiples of D = {dim}",
                    b.id
                )));
            }
            if b.sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::invalid(format!("bag {}: sigma must be positive", b.id)));
            }
            if b.mu.iter().any(|m| !m.is_finite()) {
                return Err(Error::invalid(format!("bag {}: non-finite mean", b.id)));
            }
            if index.insert(b.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate bag id {}", b.id)));
            }
        }
        Ok(PrsStore {
            dim,
            mask,
            bags,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mask(&self) -> &[f32] {
        &self.mask
    }

    pub fn bags(&self) -> &[BagRecord] {
        &self.bags
    }

    pub fn bag(&self, id: &str) -> Result<&BagRecord> {
        self.index
            .get(id)
            .map(|&i| &self.bags[i])
            .ok_or_else(|| Error::UnknownBag(id.to_string()))
    }

    /// `m_p`: mean of the active mask rows, in `f64`.
    pub fn prompted_mask(&self, prompt: Prompt) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for k in 0..NUM_OPERATORS {
            if prompt.bits()[k] {
                for (o, m) in out.iter_mut().zip(&self.mask[k * d..(k + 1) * d]) {
                    *o += f64::from(*m);
                }
            }
        }
        let n = prompt.count() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// Replaces the mask; used to force degenerate sampling in tests and
    /// diagnostics.
    pub fn with_mask(mut self, mask: Vec<f32>) -> Result<Self> {
        if mask.len() != self.mask.len() {
            return Err(Error::Dimension {
                expected: self.mask.len(),
                found: mask.len(),
            });
        }
        self.mask = mask;
        Ok(self)
    }
}

/// One `(mu, sigma)` per patch from the student encoder and heads; the mask
/// is copied from `sigmoid(U)`.
pub fn extract_distributions(model: &PrdlModel, bags: &[BagImages]) -> Result<PrsStore> {
    let d = model.repr_dim();
    let side = model.config.image_size;
    let records = bags
        .par_iter()
        .map(|bag| {
            if bag.patches.is_empty() {
                return Err(Error::invalid(format!("bag {} has no patches", bag.id)));
            }
            if let Some(p) = bag.patches.iter().find(|p| p.width() != side || p.height() != side) {
                return Err(Error::invalid(format!(
                    "bag {}: patch is {}x{} but the checkpoint (D = {d}) expects {side}x{side}",
                    bag.id,
                    p.width(),
                    p.height()
                )));
            }
            let refs: Vec<&ToyImage> = bag.patches.iter().collect();
            let dists = estimate_distributions(&model.student.backbone, &model.student.heads, &refs)?;
            let mut mu = Vec::with_capacity(refs.len() * d);
            let mut sigma = Vec::with_capacity(refs.len() * d);
            for dist in dists {
                mu.extend(dist.mu.iter().map(|v| *v as f32));
                sigma.extend(dist.sigma.iter().map(|v| (*v as f32).max(f32::MIN_POSITIVE)));
            }
            Ok(BagRecord {
                id: bag.id.clone(),
                label: bag.label,
                mu,
                sigma,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mask = model
        .student
        .mask
        .masks()
        .data()
        .iter()
        .map(|m| (*m as f32).clamp(f32::MIN_POSITIVE, MASK_CEIL))
        .collect();
    PrsStore::new(d, mask, records)
}

pub fn encode_store(store: &PrsStore) -> Vec<u8> {
    let d = store.dim;
    let mut out = Vec::new();
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(NUM_OPERATORS as u32).to_le_bytes());
    for m in &store.mask {
        out.extend_from_slice(&m.to_le_bytes());
    }
    out.extend_from_slice(&(store.bags.len() as u32).to_le_bytes());
    for b in &store.bags {
        out.extend_from_slice(&(b.id.len() as u16).to_le_bytes());
        out.extend_from_slice(b.id.as_bytes());
        out.extend_from_slice(&b.label.to_le_bytes());
        let n = b.patch_count(d);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for i in 0..n {
            for v in &b.mu[i * d..(i + 1) * d] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &b.sigma[i * d..(i + 1) * d] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn f32s(r: &mut Reader<'_>, n: usize) -> Result<Vec<f32>> {
    if n > r.remaining() / 4 {
        return Err(Error::Parse {
            offset: r.offset(),
            reason: format!("truncated: {n} f32 values announced, {} bytes left", r.remaining()),
        });
    }
    (0..n).map(|_| r.f32()).collect()
}

/// Parses and validates a store. Structure is checked first, then the
/// checksum, then the value invariants; nothing is returned on any failure.
pub fn decode_store(bytes: &[u8]) -> Result<PrsStore> {
    let mut r = Reader::new(bytes);
    if r.bytes(4)? != STORE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: "bad magic, expected PRSD".into(),
        });
    }
    let version = r.u32()?;
    if version != STORE_VERSION {
        return Err(Error::Parse {
            offset: 4,
            reason: format!("unsupported store version {version}"),
        });
    }
    let d = r.u32()? as usize;
    let k = r.u32()? as usize;
    if d == 0 {
        return Err(Error::Parse {
            offset: 8,
            reason: "D must be positive".into(),
        });
    }
    if k != NUM_OPERATORS {
        return Err(Error::Parse {
            offset: 12,
            reason: format!("K = {k}, expected {NUM_OPERATORS}"),
        });
    }
    let mask = f32s(&mut r, k * d)?;
    let count = r.u32()? as usize;
    let mut bags = Vec::with_capacity(count.min(r.remaining() / 10));
    for _ in 0..count {
        let at = r.offset();
        let id_len = r.u16()? as usize;
        let id = std::str::from_utf8(r.bytes(id_len)?)
            .map_err(|e| Error::Parse {
                offset: at + 2,
                reason: format!("bag id is not UTF-8: {e}"),
            })?
            .to_string();
        let label = r.u32()?;
        let n = r.u32()? as usize;
        let mut mu = Vec::with_capacity(n.min(r.remaining() / 8) * d);
        let mut sigma = Vec::with_capacity(mu.capacity());
        for _ in 0..n {
            mu.extend(f32s(&mut r, d)?);
            sigma.extend(f32s(&mut r, d)?);
        }
        bags.push(BagRecord {
            id,
            label,
            mu,
            sigma,
        });
    }
    let payload_end = r.offset();
    let stored = r.u32()?;
    if r.remaining() != 0 {
        return Err(Error::Parse {
            offset: r.offset(),
            reason: "trailing bytes after checksum".into(),
        });
    }
    let computed = crc32fast::hash(&bytes[..payload_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    PrsStore::new(d, mask, bags).map_err(|e| Error::Parse {
        offset: payload_end,
        reason: e.to_string(),
    })
}

pub fn write_store(store: &PrsStore, path: &Path) -> Result<()> {
    fs::write(path, encode_store(store)).map_err(|e| Error::io(path, e))
}

pub fn read_store(path: &Path) -> Result<PrsStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes)
}

/// `z_i = mu_i + s_i ⊙ eps_i` for every patch with fresh noise, where `s_i`
/// is `sigma_i ⊙ m_p` or `sigma_i` depending on `mode`. Returns `n x D`.
pub fn sample_bag<R: Rng + ?Sized>(
    store: &PrsStore,
    bag_id: &str,
    prompt: Prompt,
    mode: SigmaMode,
    rng: &mut R,
) -> Result<Tensor> {
    let bag = store.bag(bag_id)?;
    let d = store.dim;
    let m = match mode {
        SigmaMode::Prompted => store.prompted_mask(prompt),
        SigmaMode::Literal => vec![1.0; d],
    };
    let n = bag.patch_count(d);
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let eps = standard_normal_vec(d, rng);
        for j in 0..d {
            let mu = f64::from(bag.mu[i * d + j]);
            let s = f64::from(bag.sigma[i * d + j]) * m[j];
            out.push(mu + s * eps[j]);
        }
    }
    Tensor::matrix(n, d, out)
}

/// Per-patch prompts variant of [`sample_bag`]: patch `i` uses `prompts[i]`.
pub fn sample_bag_per_patch<R: Rng + ?Sized>(
    store: &PrsStore,
    bag_id: &str,
    prompts: &[Prompt],
    mode: SigmaMode,
    rng: &mut R,
) -> Result<Tensor> {
    let bag = store.bag(bag_id)?;
    let d = store.dim;
    let n = bag.patch_count(d);
    if prompts.len() != n {
        return Err(Error::Dimension {
            expected: n,
            found: prompts.len(),
        });
    }
    let mut out = Vec::with_capacity(n * d);
    for (i, &p) in prompts.iter().enumerate() {
        let m = match mode {
            SigmaMode::Prompted => store.prompted_mask(p),
            SigmaMode::Literal => vec![1.0; d],
        };
        let eps = standard_normal_vec(d, rng);
        for j in 0..d {
            let mu = f64::from(bag.mu[i * d + j]);
            out.push(mu + f64::from(bag.sigma[i * d + j]) * m[j] * eps[j]);
        }
    }
    Tensor::matrix(n, d, out)
}

/// The stored means, `n x D`.
pub fn mean_bag(store: &PrsStore, bag_id: &str) -> Result<Tensor> {
    let bag = store.bag(bag_id)?;
    let d = store.dim;
    Tensor::matrix(
        bag.patch_count(d),
        d,
        bag.mu.iter().map(|v| f64::from(*v)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::sample_prompt;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_store() -> PrsStore {
        let d = 3;
        let mask: Vec<f32> = (0..NUM_OPERATORS * d).map(|i| 0.1 + 0.05 * i as f32).collect();
        let bags = (0..3)
            .map(|b| BagRecord {
                id: format!("bag-{b}"),
                label: b % 2,
                mu: (0..(b as usize + 1) * d).map(|i| i as f32 * 0.5 - 1.0).collect(),
                sigma: (0..(b as usize + 1) * d).map(|i| 0.2 + i as f32 * 0.1).collect(),
            })
            .collect();
        PrsStore::new(d, mask, bags).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let s = toy_store();
        let bytes = encode_store(&s);
        assert_eq!(&bytes[..4], b"PRSD");
        let back = decode_store(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.bag("bag-2").unwrap(), s.bag("bag-2").unwrap());
    }

    #[test]
    fn truncation_fails_closed() {
        let bytes = encode_store(&toy_store());
        for cut in 0..bytes.len() {
            match decode_store(&bytes[..cut]) {
                Err(Error::Parse { .. }) | Err(Error::Checksum { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn flipped_payload_byte_is_a_checksum_error() {
        let mut bytes = encode_store(&toy_store());
        let n = bytes.len();
        bytes[n - 10] ^= 0x01;
        assert!(matches!(decode_store(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn bad_header_errors_carry_offsets() {
        let mut bytes = encode_store(&toy_store());
        bytes[4] = 2;
        assert!(matches!(decode_store(&bytes), Err(Error::Parse { offset: 4, .. })));
        bytes[0] = b'Q';
        assert!(matches!(decode_store(&bytes), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn invariants_enforced() {
        let s = toy_store();
        let mut bags = s.bags().to_vec();
        bags[1].id = bags[0].id.clone();
        assert!(PrsStore::new(3, s.mask().to_vec(), bags).is_err());
        let mut bags = s.bags().to_vec();
        bags[0].sigma[0] = 0.0;
        assert!(PrsStore::new(3, s.mask().to_vec(), bags).is_err());
        let mut mask = s.mask().to_vec();
        mask[0] = 1.0;
        assert!(PrsStore::new(3, mask, s.bags().to_vec()).is_err());
    }

    #[test]
    fn sampling_contract() {
        let s = toy_store();
        let p = Prompt::from_mask(0b000101).unwrap();
        let a = sample_bag(&s, "bag-2", p, SigmaMode::Prompted, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_bag(&s, "bag-2", p, SigmaMode::Prompted, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = sample_bag(&s, "bag-2", p, SigmaMode::Prompted, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.shape(), &[3, 3]);
        assert!(matches!(
            sample_bag(&s, "nope", p, SigmaMode::Prompted, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::UnknownBag(_))
        ));
        assert!(matches!(mean_bag(&s, "nope"), Err(Error::UnknownBag(_))));
    }

    #[test]
    fn zero_mask_sampling_returns_means() {
        let s = toy_store();
        let zeroed = s.clone().with_mask(vec![0.0; NUM_OPERATORS * 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = sample_prompt(&mut rng);
            let z = sample_bag(&zeroed, "bag-1", p, SigmaMode::Prompted, &mut rng).unwrap();
            assert_eq!(z, mean_bag(&s, "bag-1").unwrap());
        }
    }

    #[test]
    fn means_pass_through_bitwise() {
        let s = toy_store();
        let m = mean_bag(&s, "bag-2").unwrap();
        let bag = s.bag("bag-2").unwrap();
        for (a, b) in m.data().iter().zip(&bag.mu) {
            assert_eq!(a.to_bits(), f64::from(*b).to_bits());
        }
        assert_eq!(mean_bag(&s, "bag-2").unwrap(), m);
    }

    #[test]
    fn per_patch_variance_matches_prompted_sigma() {
        let s = toy_store();
        let p = Prompt::from_mask(0b110010).unwrap();
        let m = s.prompted_mask(p);
        let bag = s.bag("bag-1").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let mut sum = [0.0; 6];
        let mut sq = [0.0; 6];
        for _ in 0..n {
            let z = sample_bag(&s, "bag-1", p, SigmaMode::Prompted, &mut rng).unwrap();
            for (i, v) in z.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..6 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let expect = (f64::from(bag.sigma[i]) * m[i % 3]).powi(2);
            assert!((var / expect - 1.0).abs() < 0.05, "entry {i}: {var} vs {expect}");
        }
    }

    #[test]
    fn literal_mode_ignores_the_mask() {
        let s = toy_store().with_mask(vec![1e-3; NUM_OPERATORS * 3]).unwrap();
        let p = Prompt::all();
        let a = sample_bag(&s, "bag-0", p, SigmaMode::Literal, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let eps = standard_normal_vec(3, &mut ChaCha8Rng::seed_from_u64(5));
        let bag = s.bag("bag-0").unwrap();
        for j in 0..3 {
            let expect = f64::from(bag.mu[j]) + f64::from(bag.sigma[j]) * eps[j];
            assert_eq!(a.data()[j], expect);
        }
    }

    fn small_model() -> PrdlModel {
        let cfg = ModelConfig {
            image_size: 4,
            encoder_hidden: vec![6],
            repr_dim: 4,
            projector_hidden: 5,
            proj_dim: 3,
            head_depth: 1,
        };
        PrdlModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap()
    }

    fn bags(side: usize) -> Vec<BagImages> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        (0..3)
            .map(|b| BagImages {
                id: format!("b{b}"),
                label: b as u32 % 2,
                patches: (0..b + 2)
                    .map(|_| {
                        ToyImage::from_fn(side, side, |_, _| [rng.random(), rng.random(), rng.random()])
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn extraction_is_deterministic_and_faithful() {
        let model = small_model();
        let input = bags(4);
        let a = extract_distributions(&model, &input).unwrap();
        let b = extract_distributions(&model, &input).unwrap();
        assert_eq!(encode_store(&a), encode_store(&b));
        for bag in &input {
            let rec = a.bag(&bag.id).unwrap();
            assert_eq!(rec.patch_count(4), bag.patches.len());
            for (i, patch) in bag.patches.iter().enumerate() {
                let dist = model.distribution(patch).unwrap();
                for j in 0..4 {
                    let s = f64::from(rec.sigma[i * 4 + j]);
                    assert!((s - dist.sigma[j]).abs() <= dist.sigma[j] * f64::from(f32::EPSILON));
                }
            }
        }
        let mask = model.student.mask.masks();
        for (a, b) in a.mask().iter().zip(mask.data()) {
            assert_eq!(*a, *b as f32);
        }
    }

    #[test]
    fn extraction_rejects_wrong_patch_size() {
        let err = extract_distributions(&small_model(), &bags(5)).unwrap_err();
        assert!(err.to_string().contains("D = 4"), "{err}");
    }
}
