use gadmore::experts::ExpertModel;
use gadmore::router::{
    gate, quality_threshold, routing_logits, update_banks, BankEntry, MemoryBank, RouterConfig,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

fn softmax(v: &[f64], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| (x / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn cfg(tau: f64, k: usize) -> RouterConfig {
    RouterConfig {
        temperature: tau,
        top_k: k,
        ..RouterConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn weights_form_distributions(s in prop::collection::vec(-8.0f64..2.0, 5), tau in 1e-3f64..10.0, k in 1usize..=5) {
        let d = gate(&s, &cfg(tau, k));
        prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!((d.active_weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert_eq!(d.active.len(), k);
        prop_assert!(d.weights.iter().chain(&d.active_weights).all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn temperature_never_changes_the_winner(s in prop::collection::vec(-8.0f64..2.0, 5), t1 in 1e-3f64..100.0, t2 in 1e-3f64..100.0) {
        let (a, b) = (gate(&s, &cfg(t1, 2)), gate(&s, &cfg(t2, 2)));
        prop_assert_eq!(argmax(&a.weights), argmax(&s));
        prop_assert_eq!(argmax(&b.weights), argmax(&s));
        prop_assert_eq!(a.active[0], argmax(&s));
    }

    #[test]
    fn cold_temperature_is_one_hot(s in prop::collection::vec(-8.0f64..2.0, 5)) {
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        // weights only saturate when the top two logits are separated by a few τ
        prop_assume!(sorted[0] - sorted[1] > 2e-3);
        let d = gate(&s, &cfg(1e-4, 2));
        prop_assert!(d.active_weights[0] >= 1.0 - 1e-6);
    }

    #[test]
    fn renormalization_is_a_subset_softmax(s in prop::collection::vec(-8.0f64..2.0, 5), tau in 0.05f64..5.0, k in 1usize..=5) {
        let d = gate(&s, &cfg(tau, k));
        let picked: Vec<f64> = d.active.iter().map(|&i| s[i]).collect();
        let oracle = softmax(&picked, tau);
        for (w, o) in d.active_weights.iter().zip(&oracle) {
            prop_assert!((w - o).abs() <= 1e-12);
        }
        // also the full weights restricted to the subset, renormalized
        let z: f64 = d.active.iter().map(|&i| d.weights[i]).sum();
        for (j, &i) in d.active.iter().enumerate() {
            prop_assert!((d.weights[i] / z - d.active_weights[j]).abs() <= 1e-9);
        }
    }

    #[test]
    fn threshold_schedule_is_monotone(a in 0.0f64..60.0, b in 0.0f64..60.0) {
        let c = RouterConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quality_threshold(lo, &c) <= quality_threshold(hi, &c));
        if lo >= c.e_total as f64 {
            prop_assert_eq!(quality_threshold(lo, &c), c.tau_max);
        }
    }

    #[test]
    fn logits_ignore_entry_order(seed in any::<u64>(), h in prop::collection::vec(-0.8f64..0.8, 3), squared in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let experts: Vec<ExpertModel> = [0.0, -1.0, 1.0].iter().enumerate()
            .map(|(i, &k)| ExpertModel::init(i, k, 3, 2, &mut rng)).collect();
        let mut banks: Vec<MemoryBank> = (0..3).map(|i| MemoryBank::new(i, 8)).collect();
        for b in &mut banks {
            for j in 0..5 {
                let e: Vec<f64> = (0..3).map(|c| 0.5 * ((seed as f64) * 0.001 + (j * 3 + c) as f64).sin()).collect();
                b.entries.push(BankEntry { embedding: e, quality: 0.9 - 0.01 * j as f64 });
            }
        }
        let before = routing_logits(&h, &banks, &experts, squared).unwrap();
        for b in &mut banks {
            b.entries.reverse();
            b.entries.swap(0, 2);
        }
        let after = routing_logits(&h, &banks, &experts, squared).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn bank_state_machine(seed in any::<u64>(), steps in prop::collection::vec((1usize..12, 0usize..10), 1..20)) {
        let c = RouterConfig {
            capacity: 6,
            per_update_cap: 2,
            e_cold: 2,
            e_total: 6,
            top_k: 2,
            ..RouterConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut banks: Vec<MemoryBank> = (0..3).map(|i| MemoryBank::new(i, c.capacity)).collect();
        let mut epochs: Vec<usize> = steps.iter().map(|s| s.1).collect();
        epochs.sort_unstable();
        for (&(b, _), &epoch) in steps.iter().zip(&epochs) {
            let emb = Array2::from_shape_fn((b, 2), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
            let errors = Array2::from_shape_fn((b, 3), |_| rand::Rng::random_range(&mut rng, 0.0..2.0));
            let active: Vec<Vec<usize>> = (0..b).map(|v| vec![v % 3, (v + 1) % 3]).collect();
            let sizes: Vec<usize> = banks.iter().map(|x| x.len()).collect();
            let mut twin = banks.clone();
            let log = update_banks(&mut banks, &emb, &active, &errors, epoch, &c);
            let log2 = update_banks(&mut twin, &emb, &active, &errors, epoch, &c);
            prop_assert_eq!(&banks, &twin);
            prop_assert_eq!(&log, &log2);
            if epoch < c.e_cold {
                prop_assert!(log.is_empty());
                prop_assert_eq!(banks.iter().map(|x| x.len()).collect::<Vec<_>>(), sizes.clone());
            }
            for (i, bank) in banks.iter().enumerate() {
                prop_assert!(bank.len() <= c.capacity);
                prop_assert!(bank.len() >= sizes[i]);
                bank.validate(2).unwrap();
            }
            for u in &log {
                prop_assert!(u.inserted + u.replaced <= c.per_update_cap);
                prop_assert_eq!(u.size, banks[u.expert].len());
            }
        }
    }
}
