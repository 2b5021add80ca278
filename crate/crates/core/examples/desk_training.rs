//! Generates the desk dataset, trains the desk model and evaluates it.
//!
//! `cargo run --release --example desk_training -- [steps] [base_lr] [seed]`

use std::time::Instant;

use adamorph::evaluation::evaluate;
use adamorph::model::{AdaMorph, ModelConfig};
use adamorph::synth::{generate_dataset, DataConfig, Split};
use adamorph::trainer::{dataset_fingerprint, fit_stats, RoundRobin, TrainConfig, Trainer};

fn main() -> adamorph::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut config = TrainConfig {
        total_steps: steps,
        ..TrainConfig::default()
    };
    if let Some(lr) = args.next().and_then(|s| s.parse().ok()) {
        config.base_lr = lr;
    }

    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    let t0 = Instant::now();
    let ds = generate_dataset(&DataConfig::default(), seed)?;
    println!("dataset: {} train windows in {:.1?}", ds.train.len(), t0.elapsed());

    let stats = fit_stats(&ds)?;
    let model = AdaMorph::new(ModelConfig::desk(ds.robot_dofs()), seed)?;
    let mut trainer = Trainer::new(model, stats, config, seed, dataset_fingerprint(&ds))?;
    let data = RoundRobin::new(ds.split(Split::Train), ds.robots.len(), trainer.config.batch_size, seed)?;

    let t1 = Instant::now();
    trainer.run_until(&data, steps, |_, rec| {
        if rec.step % 50 == 0 || rec.step + 1 == steps {
            println!(
                "step {:5} robot {} l_inst {:.4} l_rot {:.5} l_traj {:.4} lr {:.2e}",
                rec.step, rec.robot, rec.losses.l_inst, rec.losses.l_rot, rec.losses.l_traj, rec.lr
            );
        }
        Ok(())
    })?;
    println!("{steps} steps in {:.1?}", t1.elapsed());

    let splits = [(Split::Test, ds.split(Split::Test)), (Split::ZeroShot, ds.split(Split::ZeroShot))];
    let report = evaluate(&trainer.model, &trainer.stats, &ds.robots, &splits, trainer.step, seed)?;
    for split in &report.splits {
        println!("{} ({})", split.split.name(), split.label);
        for r in &split.robots {
            println!(
                "  robot {} family {}: root pcc median {:.3}, activity pcc median {:.3}",
                r.robot,
                r.family,
                r.root_velocity_pcc.median.unwrap_or(f64::NAN),
                r.activity_pcc.median.unwrap_or(f64::NAN)
            );
        }
    }
    println!(
        "prompt similarity: within family {:.3}, across {:.3}",
        report.prompts.within_family_median.unwrap_or(f64::NAN),
        report.prompts.across_family_median.unwrap_or(f64::NAN)
    );
    Ok(())
}
