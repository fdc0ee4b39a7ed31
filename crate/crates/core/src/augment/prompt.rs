use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_OPERATORS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    ResizedCrop,
    HorizontalFlip,
    ColorJitter,
    Grayscale,
    GaussianBlur,
    Solarization,
}

impl Operator {
    /// Canonical application order.
    pub const ALL: [Operator; NUM_OPERATORS] = [
        Operator::ResizedCrop,
        Operator::HorizontalFlip,
        Operator::ColorJitter,
        Operator::Grayscale,
        Operator::GaussianBlur,
        Operator::Solarization,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| {
            Error::invalid(format!(
                "operator index {i} out of range [0, {NUM_OPERATORS})"
            ))
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::ResizedCrop => "ResizedCrop",
            Operator::HorizontalFlip => "HorizontalFlip",
            Operator::ColorJitter => "ColorJitter",
            Operator::Grayscale => "Grayscale",
            Operator::GaussianBlur => "GaussianBlur",
            Operator::Solarization => "Solarization",
        }
    }
}

/// Non-empty set of active operators.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Prompt {
    mask: u8,
}

impl Prompt {
    /// Bit `k` of `mask` activates operator `k`.
    pub fn from_mask(mask: u8) -> Result<Self> {
        if mask == 0 {
            return Err(Error::invalid("prompt must activate at least one operator"));
        }
        if mask >> NUM_OPERATORS != 0 {
            return Err(Error::invalid(format!(
                "prompt mask {mask:#b} has bits beyond {NUM_OPERATORS} operators"
            )));
        }
        Ok(Prompt { mask })
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.len() != NUM_OPERATORS {
            return Err(Error::invalid(format!(
                "prompt needs {NUM_OPERATORS} bits, got {}",
                bits.len()
            )));
        }
        let mut mask = 0u8;
        for (k, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => mask |= 1 << k,
                other => return Err(Error::invalid(format!("prompt bit must be 0 or 1, got {other}"))),
            }
        }
        Self::from_mask(mask)
    }

    pub fn single(op: Operator) -> Self {
        Prompt {
            mask: 1 << op.index(),
        }
    }

    pub fn all() -> Self {
        Prompt {
            mask: (1 << NUM_OPERATORS) - 1,
        }
    }

    pub fn mask(self) -> u8 {
        self.mask
    }

    pub fn is_active(self, op: Operator) -> bool {
        self.mask & (1 << op.index()) != 0
    }

    pub fn bits(self) -> [bool; NUM_OPERATORS] {
        std::array::from_fn(|k| self.mask & (1 << k) != 0)
    }

    /// `||p||_1`.
    pub fn count(self) -> usize {
        self.mask.count_ones() as usize
    }

    /// `p / ||p||_1` as a dense row.
    pub fn normalized_weights(self) -> [f64; NUM_OPERATORS] {
        let n = self.count() as f64;
        self.bits().map(|b| if b { 1.0 / n } else { 0.0 })
    }
}

impl fmt::Debug for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Prompt(")?;
        for b in self.bits() {
            write!(f, "{}", b as u8)?;
        }
        write!(f, ")")
    }
}

/// Each bit on independently with probability 1/2, redrawn while all-zero.
pub fn sample_prompt<R: Rng + ?Sized>(rng: &mut R) -> Prompt {
    loop {
        let mut mask = 0u8;
        for k in 0..NUM_OPERATORS {
            if rng.random::<bool>() {
                mask |= 1 << k;
            }
        }
        if mask != 0 {
            return Prompt { mask };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_prompt_rejected() {
        assert!(Prompt::from_mask(0).is_err());
        assert!(Prompt::from_bits(&[0; 6]).is_err());
        assert!(Prompt::from_bits(&[0, 2, 0, 0, 0, 0]).is_err());
        assert!(Prompt::from_mask(64).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_prompt(&mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_prompt(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.count() > 0);
    }

    #[test]
    fn never_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1_000_000 {
            assert_ne!(sample_prompt(&mut rng).mask(), 0);
        }
    }

    #[test]
    fn bit_frequencies_near_half() {
        // Conditioned on a non-zero draw each bit is on with 32/63 = 0.5079.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut counts = [0usize; NUM_OPERATORS];
        for _ in 0..n {
            for (c, b) in counts.iter_mut().zip(sample_prompt(&mut rng).bits()) {
                *c += b as usize;
            }
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.49..=0.51).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn normalized_weights_sum_to_one() {
        for mask in 1u8..64 {
            let w = Prompt::from_mask(mask).unwrap().normalized_weights();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
