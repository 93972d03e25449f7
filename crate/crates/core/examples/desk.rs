//! Desk-scale comparison of the training methods on the standard dataset.
//!
//! ```text
//! cargo run --release --example desk -- --q 0.4 --seeds 5
//! cargo run --release --example desk -- --q 0.2 --skew 1 --methods CDCR,CDCR_DIFF
//! ```

use std::time::Instant;

use clap::Parser;

use cdcr_core::curriculum::tail_classes;
use cdcr_core::datagen::{Dataset, DatasetSpec};
use cdcr_core::losses::NegativeMode;
use cdcr_core::trainer::{train, Method, TrainConfig, TrainHistory};

#[derive(Parser)]
struct Args {
    /// Flipping rate.
    #[arg(long, default_value_t = 0.4)]
    q: f64,
    #[arg(long, default_value_t = 0.0)]
    skew: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Runs seeds 1..=N.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    #[arg(long, value_delimiter = ',', default_value = "BCE,CD,CDCR,CDCR_DIFF")]
    methods: Vec<Method>,
    #[arg(long, default_value = "CONFIDENT_NEGATIVES")]
    negative_mode: NegativeMode,
    /// Print every epoch to stderr.
    #[arg(long)]
    trace: bool,
}

fn main() -> cdcr_core::Result<()> {
    let args = Args::parse();
    for seed in 1..=args.seeds {
        let spec = DatasetSpec {
            class_frequency_skew: args.skew,
            concept_noise_std: args.noise,
            ..DatasetSpec::desk_standard(seed)
        };
        let data = Dataset::synthesize(&spec, args.q)?;
        let tail = tail_classes(&data.train.true_labels().column_sums());
        for &method in &args.methods {
            let start = Instant::now();
            let config = TrainConfig {
                method,
                epochs: args.epochs,
                alpha: args.alpha,
                negative_mode: args.negative_mode,
                seed,
                ..TrainConfig::desk_calibrated()
            };
            let out = train(config, &data)?;
            if args.trace {
                trace(&out.history);
            }
            let r = out.final_record();
            let tail_id: usize = tail.iter().map(|&j| r.per_class_identified[j]).sum();
            println!(
                "seed {seed} {method:>9} mAP {:.4} (raw {:.4}) precision {:.4} identified {} tail {} p_true {:.3} p_noisy {:.3} {:.1}s",
                r.test.map,
                r.test_raw.map,
                r.precision,
                r.identified,
                tail_id,
                r.mean_prob_true_candidates,
                r.mean_prob_noisy_candidates,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

fn trace(h: &TrainHistory) {
    for r in &h.records {
        eprintln!(
            "  epoch {:2} {:10} lr {:.2e} loss {:.4} mAP {:.4} precision {:.3} identified {}",
            r.epoch, r.phase, r.lr, r.train_loss, r.test.map, r.precision, r.identified
        );
    }
}
