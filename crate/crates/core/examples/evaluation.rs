//! Trains briefly, then writes a consistency and prompt report.

use adamorph::evaluation::{evaluate, write_report};
use adamorph::model::{AdaMorph, ModelConfig};
use adamorph::synth::{generate_dataset, DataConfig, Split};
use adamorph::trainer::{dataset_fingerprint, fit_stats, RoundRobin, TrainConfig, Trainer};

fn main() -> adamorph::Result<()> {
    let ds = generate_dataset(
        &DataConfig {
            train_windows: 200,
            test_windows: 60,
            zero_shot_windows: 60,
            ..DataConfig::default()
        },
        5,
    )?;
    let config = TrainConfig {
        total_steps: 120,
        ..TrainConfig::default()
    };
    let model = AdaMorph::new(ModelConfig::desk(ds.robot_dofs()), 5)?;
    let mut t = Trainer::new(model, fit_stats(&ds)?, config, 5, dataset_fingerprint(&ds))?;
    let data = RoundRobin::new(&ds.train, ds.robots.len(), t.config.batch_size, 5)?;
    t.run_until(&data, usize::MAX, |_, _| Ok(()))?;

    let splits = [(Split::Test, ds.test.as_slice()), (Split::ZeroShot, ds.zero_shot.as_slice())];
    let report = evaluate(&t.model, &t.stats, &ds.robots, &splits, t.step, 5)?;
    for split in &report.splits {
        for r in &split.robots {
            println!(
                "{} robot {}: root {:?}, activity {:?}, undefined {}",
                split.label, r.robot, r.root_velocity_pcc.median, r.activity_pcc.median, r.root_velocity_pcc.undefined
            );
        }
    }
    let dir = std::env::temp_dir().join("adamorph-eval-example");
    write_report(&dir, &report)?;
    println!("report written to {}", dir.display());
    Ok(())
}
