//! Desk-scale recovery experiment on Gaussian blobs with symmetric label noise.
//!
//! Trains the plain cross-entropy baseline (clean and noisy labels) and the
//! permute-prediction variant, then prints final test and permutation accuracies.
//!
//! ```text
//! cargo run --release --example blobs_recovery -- [key=value ...]
//! ```
//! Keys: `arch` (linear | mlpN), `sep`, `rate`, `epochs`, `lr`, `eta`, `ia`, `wd`,
//! `momentum`, `batch`, `seeds` (count), `milestones` (e.g. 80:100), `test`.

use std::collections::HashMap;

use permll::data::{make_blobs, BlobSpec};
use permll::losses::LossKind;
use permll::model::Arch;
use permll::noise::{self, NoiseKind, NoiseSpec, NoisyDataset};
use permll::trainer::{train, TrainConfig, TrainData, Variant};

fn main() -> permll::Result<()> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| {
            a.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
        })
        .collect();
    let get = |k: &str, d: &str| args.get(k).cloned().unwrap_or_else(|| d.to_string());
    let num = |k: &str, d: &str| get(k, d).parse::<f64>().expect("numeric argument");

    let arch = match get("arch", "linear").as_str() {
        "linear" => Arch::Linear,
        other => Arch::Mlp {
            hidden_width: other.trim_start_matches("mlp").parse().expect("mlpN"),
        },
    };
    let separation = num("sep", "4.0");
    let rate = num("rate", "0.4");
    let seeds = num("seeds", "3") as u64;
    let test_per_class = num("test", "5000") as usize;
    let milestones: Vec<usize> = get("milestones", "80:100")
        .split(':')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().expect("milestone"))
        .collect();

    for seed in 0..seeds {
        let blobs = BlobSpec {
            classes: 3,
            per_class: 1000,
            dim: 2,
            separation,
            std: 1.0,
            seed,
        };
        let pool = make_blobs(&blobs)?;
        let test = make_blobs(&BlobSpec {
            per_class: test_per_class,
            seed: seed + 1000,
            ..blobs.clone()
        })?;
        let noisy = noise::apply(
            &NoiseSpec {
                kind: NoiseKind::Symmetric,
                rate,
                seed,
                ..Default::default()
            },
            &pool,
        )?;
        let config = TrainConfig {
            variant: Variant::PermutePrediction,
            loss: LossKind::CrossEntropy,
            epochs: num("epochs", "120") as usize,
            batch_size: num("batch", "64") as usize,
            lr: num("lr", "0.1"),
            milestones: milestones.clone(),
            lr_decay: 0.1,
            momentum: num("momentum", "0.9"),
            weight_decay: num("wd", "0.0005"),
            eta_alpha: num("eta", "100"),
            i_alpha: num("ia", "0.6"),
            seed,
            couple_alpha_schedule: false,
        };
        let run = |train: NoisyDataset, variant: Variant| {
            let data = TrainData {
                train,
                validation: None,
                test: test.clone(),
            };
            train_report(&config, variant, arch, &data)
        };
        let clean = run(NoisyDataset::clean(pool.clone()), Variant::PlainCeBaseline)?;
        let baseline = run(noisy.clone(), Variant::PlainCeBaseline)?;
        let perm = run(noisy.clone(), Variant::PermutePrediction)?;
        println!(
            "seed {seed}: clean {:.3}  ce {:.3}  permll {:.3}  perm {:.2} (init {:.2})  delta {:+.3}",
            clean.0, baseline.0, perm.0, perm.1, perm.2, perm.0 - baseline.0
        );
    }
    Ok(())
}

fn train_report(
    config: &TrainConfig,
    variant: Variant,
    arch: Arch,
    data: &TrainData,
) -> permll::Result<(f64, f64, f64)> {
    let report = train(
        &TrainConfig {
            variant,
            ..config.clone()
        },
        arch,
        data,
    )?;
    Ok((
        report.final_test_accuracy(),
        report.final_permutation_accuracy(),
        report.initial_permutation_accuracy,
    ))
}
