use prdl::augment::{Prompt, NUM_OPERATORS};
use prdl::autodiff::Tensor;
use prdl::mil::{attention_pool, roc_auc, MilModel};
use prdl::prs::{decode_store, encode_store, mean_bag, sample_bag, BagRecord, PrsStore, SigmaMode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn arb_store() -> impl Strategy<Value = PrsStore> {
    (1usize..5, 1usize..4).prop_flat_map(|(dim, nbags)| {
        let mask = prop::collection::vec(0.01f32..0.99, NUM_OPERATORS * dim);
        let bag = (1usize..4).prop_flat_map(move |n| {
            (
                prop::collection::vec(-5.0f32..5.0, n * dim),
                prop::collection::vec(0.01f32..3.0, n * dim),
                0u32..3,
            )
        });
        (mask, prop::collection::vec(bag, nbags)).prop_map(move |(mask, bags)| {
            let bags = bags
                .into_iter()
                .enumerate()
                .map(|(i, (mu, sigma, label))| BagRecord {
                    id: format!("bag-{i}"),
                    label,
                    mu,
                    sigma,
                })
                .collect();
            PrsStore::new(dim, mask, bags).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn store_round_trips(store in arb_store()) {
        let bytes = encode_store(&store);
        let back = decode_store(&bytes).unwrap();
        prop_assert_eq!(back.dim(), store.dim());
        prop_assert_eq!(back.mask(), store.mask());
        prop_assert_eq!(back.bags(), store.bags());
        prop_assert_eq!(encode_store(&back), bytes);
    }

    #[test]
    fn any_corruption_is_rejected(store in arb_store(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode_store(&store);
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_store(&bytes).is_err());
        let cut = pos.index(bytes.len());
        prop_assert!(decode_store(&encode_store(&store)[..cut]).is_err());
    }

    #[test]
    fn prompt_masks_round_trip(mask in 1u8..(1 << NUM_OPERATORS)) {
        let p = Prompt::from_mask(mask).unwrap();
        prop_assert_eq!(p.mask(), mask);
        prop_assert_eq!(p.count(), mask.count_ones() as usize);
        let w = p.normalized_weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pairwise_count(pairs in prop::collection::vec((any::<bool>(), 0u8..6), 2..30)) {
        let labels: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
        let pos = labels.iter().filter(|l| **l).count();
        prop_assume!(pos > 0 && pos < labels.len());
        let mut wins = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let expected = wins / (pos * (labels.len() - pos)) as f64;
        prop_assert!((roc_auc(&labels, &scores).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn attention_pool_ignores_patch_order(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..8),
        seed in any::<u64>(),
        rot in 0usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = MilModel::init(4, 5, 2, &mut rng);
        let n = rows.len();
        let z = Tensor::matrix(n, 4, rows.concat()).unwrap();
        let mut rotated = rows.clone();
        rotated.rotate_left(rot % n);
        let zr = Tensor::matrix(n, 4, rotated.concat()).unwrap();
        let (a, _) = attention_pool(&model, &z).unwrap();
        let (b, _) = attention_pool(&model, &zr).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

/// Residuals of `sample_bag` around `mean_bag`, scaled by `sigma ⊙ m_p`,
/// are standard normal.
#[test]
fn sampled_residuals_are_standard_normal() {
    let dim = 4;
    let n = 2500;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mask: Vec<f32> = (0..NUM_OPERATORS * dim).map(|i| 0.1 + 0.8 * (i as f32 / 24.0)).collect();
    let mu: Vec<f32> = (0..n * dim).map(|i| (i % 7) as f32 - 3.0).collect();
    let sigma: Vec<f32> = (0..n * dim).map(|i| 0.2 + (i % 5) as f32 * 0.4).collect();
    let store = PrsStore::new(
        dim,
        mask,
        vec![BagRecord { id: "b".into(), label: 0, mu, sigma: sigma.clone() }],
    )
    .unwrap();
    let prompt = Prompt::from_mask(0b010011).unwrap();
    let m = store.prompted_mask(prompt);
    let z = sample_bag(&store, "b", prompt, SigmaMode::Prompted, &mut rng).unwrap();
    let means = mean_bag(&store, "b").unwrap();
    let mut r: Vec<f64> = z
        .data()
        .iter()
        .zip(means.data())
        .enumerate()
        .map(|(k, (a, b))| (a - b) / (f64::from(sigma[k]) * m[k % dim]))
        .collect();
    assert_eq!(r.len(), 10_000);

    r.sort_by(f64::total_cmp);
    let phi = Normal::new(0.0, 1.0).unwrap();
    let len = r.len() as f64;
    let d = r.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = phi.cdf(x);
        d.max((i as f64 + 1.0) / len - f).max(f - i as f64 / len)
    });
    let lambda = (len.sqrt() + 0.12 + 0.11 / len.sqrt()) * d;
    let p: f64 = (1..=100)
        .map(|k| {
            let k = f64::from(k);
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    assert!(p > 0.01, "KS D = {d}, p = {p}");
}
