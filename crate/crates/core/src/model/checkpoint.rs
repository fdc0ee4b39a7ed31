//! Versioned binary checkpoint.
//!
//! Layout (little-endian): magic `PRDL`, version `u32`, `D`, `K`, `P`,
//! image side, encoder layer count, projector layer count and head depth as
//! `u32`, step `u64`, EMA momentum `f64`, blob count `u32`, then each blob as
//! rank `u32`, extents `u32 * rank` and `f64` values. Blob order: student
//! encoder, student projector, mean head, log-variance head, `U`, teacher
//! encoder, teacher projector, teacher center.

use std::fs;
use std::path::Path;

use super::nn::{Linear, Mlp};
use super::{Backbone, DistributionHeads, EmaState, MaskMatrix, ModelConfig, PrdlModel, StudentParams};
use crate::augment::NUM_OPERATORS;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::{put_blob, put_u32, read_blob, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PRDL";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &PrdlModel) -> Vec<u8> {
    let cfg = &model.config;
    let s = &model.student;
    let mut blobs: Vec<&Tensor> = Vec::new();
    blobs.extend(s.backbone.encoder.tensors());
    blobs.extend(s.backbone.projector.tensors());
    blobs.extend(s.heads.mean.tensors());
    blobs.extend(s.heads.log_var.tensors());
    blobs.push(s.mask.pre_activation());
    blobs.extend(model.ema.teacher.encoder.tensors());
    blobs.extend(model.ema.teacher.projector.tensors());
    blobs.push(&model.center);

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    put_u32(&mut out, cfg.repr_dim);
    put_u32(&mut out, NUM_OPERATORS);
    put_u32(&mut out, cfg.proj_dim);
    put_u32(&mut out, cfg.image_size);
    put_u32(&mut out, s.backbone.encoder.layers.len());
    put_u32(&mut out, s.backbone.projector.layers.len());
    put_u32(&mut out, cfg.head_depth);
    out.extend_from_slice(&model.step.to_le_bytes());
    out.extend_from_slice(&model.ema.momentum.to_le_bytes());
    put_u32(&mut out, blobs.len());
    for b in blobs {
        put_blob(&mut out, b);
    }
    out
}

fn take_mlp(blobs: &mut std::vec::IntoIter<Tensor>, layers: usize, at: usize) -> Result<Mlp> {
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        let (Some(weight), Some(bias)) = (blobs.next(), blobs.next()) else {
            return Err(Error::Parse {
                offset: at,
                reason: "missing layer blobs".into(),
            });
        };
        if weight.shape().len() != 2 || bias.shape() != [1, weight.cols()] {
            return Err(Error::Parse {
                offset: at,
                reason: format!("layer shapes {:?} / {:?} disagree", weight.shape(), bias.shape()),
            });
        }
        out.push(Linear { weight, bias });
    }
    for pair in out.windows(2) {
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(Error::Parse {
                offset: at,
                reason: "consecutive layer widths disagree".into(),
            });
        }
    }
    Ok(Mlp { layers: out })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PrdlModel> {
    let mut r = Reader::new(bytes);
    let magic = r.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: "bad magic, expected PRDL".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            offset: 4,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let d = r.u32()? as usize;
    let k = r.u32()? as usize;
    let p = r.u32()? as usize;
    let image_size = r.u32()? as usize;
    let enc_layers = r.u32()? as usize;
    let proj_layers = r.u32()? as usize;
    let head_depth = r.u32()? as usize;
    let step = r.u64()?;
    let momentum = r.f64()?;
    if k != NUM_OPERATORS {
        return Err(Error::Parse {
            offset: 12,
            reason: format!("checkpoint has K = {k}, expected {NUM_OPERATORS}"),
        });
    }
    if proj_layers != 2 || enc_layers == 0 || head_depth == 0 {
        return Err(Error::Parse {
            offset: 20,
            reason: "unsupported layer counts".into(),
        });
    }
    let count = r.u32()? as usize;
    let expected = 2 * (2 * enc_layers + 2 * proj_layers) + 2 * 2 * head_depth + 2;
    if count != expected {
        return Err(Error::Parse {
            offset: r.offset() - 4,
            reason: format!("expected {expected} blobs, found {count}"),
        });
    }
    let blobs_at = r.offset();
    let blobs = (0..count).map(|_| read_blob(&mut r)).collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(Error::Parse {
            offset: r.offset(),
            reason: "trailing bytes after last blob".into(),
        });
    }
    let mut it = blobs.into_iter();
    let encoder = take_mlp(&mut it, enc_layers, blobs_at)?;
    let projector = take_mlp(&mut it, proj_layers, blobs_at)?;
    let mean = take_mlp(&mut it, head_depth, blobs_at)?;
    let log_var = take_mlp(&mut it, head_depth, blobs_at)?;
    let u = it.next().expect("counted");
    let t_encoder = take_mlp(&mut it, enc_layers, blobs_at)?;
    let t_projector = take_mlp(&mut it, proj_layers, blobs_at)?;
    let center = it.next().expect("counted");

    let mismatch = |what: &str| Error::Parse {
        offset: blobs_at,
        reason: format!("{what} does not match header dimensions"),
    };
    if encoder.in_dim() != 3 * image_size * image_size || encoder.out_dim() != d {
        return Err(mismatch("encoder"));
    }
    if projector.in_dim() != d || projector.out_dim() != p {
        return Err(mismatch("projector"));
    }
    if mean.in_dim() != d || mean.out_dim() != d || log_var.in_dim() != d || log_var.out_dim() != d {
        return Err(mismatch("distribution heads"));
    }
    if center.shape() != [1, p] {
        return Err(mismatch("center"));
    }
    let teacher = Backbone {
        encoder: t_encoder,
        projector: t_projector,
    };
    let student_bb = Backbone { encoder, projector };
    if teacher.tensors().iter().zip(student_bb.tensors()).any(|(a, b)| a.shape() != b.shape()) {
        return Err(mismatch("teacher"));
    }
    let mask = MaskMatrix::new(u).map_err(|_| mismatch("mask matrix"))?;
    if mask.dim() != d {
        return Err(mismatch("mask matrix"));
    }
    let config = ModelConfig {
        image_size,
        encoder_hidden: student_bb.encoder.layers[..enc_layers - 1]
            .iter()
            .map(|l| l.out_dim())
            .collect(),
        repr_dim: d,
        projector_hidden: student_bb.projector.layers[0].out_dim(),
        proj_dim: p,
        head_depth,
    };
    Ok(PrdlModel {
        config,
        student: StudentParams {
            backbone: student_bb,
            heads: DistributionHeads { mean, log_var },
            mask,
        },
        ema: EmaState { teacher, momentum },
        center,
        step,
    })
}

pub fn write_checkpoint(model: &PrdlModel, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<PrdlModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> PrdlModel {
        let cfg = ModelConfig {
            image_size: 4,
            encoder_hidden: vec![7, 5],
            repr_dim: 3,
            projector_hidden: 6,
            proj_dim: 4,
            head_depth: 2,
        };
        let mut m = PrdlModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        m.step = 41;
        m.ema.momentum = 0.9965;
        m.center = Tensor::row(vec![0.1, -0.2, 0.3, 1e-300]);
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode_checkpoint(&m);
        assert_eq!(&bytes[..4], b"PRDL");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn truncation_and_bad_magic_fail() {
        let bytes = encode_checkpoint(&model());
        for cut in [0, 3, 10, 50, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(decode_checkpoint(&bad).is_err());
    }
}
