//! Cross-module invariants that need the generator and the trainer
//! together.

use fedbias::data::{generate_synthetic, SyntheticConfig};
use fedbias::metrics::{evaluate, pearson, EvalOptions, FairnessMetric};
use fedbias::training::{train_standalone, TrainingConfig};

/// Spearman rank correlation; the oracle ranks with average ties.
fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(values: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let mut out = vec![0.0; values.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                out[idx] = avg;
            }
            i = j + 1;
        }
        out
    }
    pearson(&ranks(xs), &ranks(ys)).expect("non-degenerate ranks")
}

#[test]
fn spearman_oracle_sanity() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[9.0, 5.0, 1.0]), -1.0);
    // Monotone nonlinear map keeps rank correlation at 1.
    assert_eq!(
        spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 8.0, 27.3, 1000.0]),
        1.0
    );
}

/// Planted bias levels order the parties' trained standalone DP gaps.
#[test]
fn generator_bias_is_monotone_in_standalone_gap() {
    let k = 6;
    let bias: Vec<f64> = (0..k).map(|i| 0.9 * i as f64 / (k - 1) as f64).collect();
    for seed in 0..10u64 {
        let parties: Vec<fedbias::Party> = generate_synthetic(&SyntheticConfig {
            d_num: 6,
            parties: k,
            n_train: 400,
            n_test: 500,
            bias_levels: bias.clone(),
            seed: 500 + seed,
        })
        .unwrap();
        let cfg = TrainingConfig {
            rounds: 50,
            seed,
            ..TrainingConfig::default()
        };
        let gaps: Vec<f64> = parties
            .iter()
            .map(|party| {
                let model = train_standalone(party, &cfg).unwrap();
                evaluate(&model, &party.test, EvalOptions::default())
                    .unwrap()
                    .gap(FairnessMetric::Dp)
                    .unwrap()
            })
            .collect();
        let rho = spearman(&bias, &gaps);
        assert!(rho >= 0.8, "seed {seed}: spearman {rho} (gaps {gaps:?})");
    }
}
