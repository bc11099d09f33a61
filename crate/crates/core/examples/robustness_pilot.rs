//! Trains standard and black-background models on background-correlated
//! synthetic data and scores them on a background-randomized test set.
//!
//! Usage: `robustness_pilot [seed...]`

use std::time::Instant;

use fvlab::dataset::{generate_synthetic, split, BackgroundMode, SplitFractions, SyntheticConfig};
use fvlab::model::{ModelConfig, ResNetLite};
use fvlab::seed::derive_seed;
use fvlab::training::{evaluate, train_variant, SuiteSeeds, TrainConfig};
use fvlab::transforms::{build_variant, NoiseParams, VariantKind};

fn main() -> fvlab::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("seed")).collect();
    let seeds = if seeds.is_empty() { vec![100, 101, 102] } else { seeds };
    for master in seeds {
        let base = SyntheticConfig::default();
        let correlated = generate_synthetic(&SyntheticConfig {
            background_mode: BackgroundMode::Correlated,
            correlation: 0.95,
            seed: derive_seed(master, "generate-data", 0),
            ..base.clone()
        })?;
        let randomized = generate_synthetic(&SyntheticConfig {
            per_class: 25,
            seed: derive_seed(master, "randomized-test", 0),
            ..base.clone()
        })?;
        let parts = split(&correlated, SplitFractions::default(), derive_seed(master, "split", 0))?;
        let seeds = SuiteSeeds {
            init: derive_seed(master, "init", 0),
            variant: derive_seed(master, "build-variants", 0),
        };
        let cfg = TrainConfig {
            seed: derive_seed(master, "train", 0),
            ..TrainConfig::default()
        };
        let noise = NoiseParams::default();
        let initial = ResNetLite::init(ModelConfig::new(base.resolution, base.classes), seeds.init)?;
        for kind in [VariantKind::Standard, VariantKind::BlackBackground] {
            let start = Instant::now();
            let variant = build_variant(&parts.train, kind, &noise, seeds.variant)?;
            let run = train_variant(initial.clone(), &variant.data, &parts.val, &cfg, variant.record, seeds)?;
            let test = evaluate(&run.checkpoint.model, &randomized)?;
            println!(
                "seed {master} {kind:>8}: train {:.4} val {:.4} randomized {:.4} ({:.0?})",
                run.metrics.train_acc,
                run.metrics.val_acc,
                test.accuracy,
                start.elapsed()
            );
        }
    }
    Ok(())
}
