//! Retargets one human window to every robot and compares the integrated
//! base trajectories with the oracle's.

use adamorph::evaluation::predict_for;
use adamorph::model::{AdaMorph, ModelConfig};
use adamorph::synth::{generate_dataset, DataConfig};
use adamorph::trainer::{dataset_fingerprint, fit_stats, RoundRobin, TrainConfig, Trainer};

fn main() -> adamorph::Result<()> {
    let ds = generate_dataset(
        &DataConfig {
            train_windows: 200,
            ..DataConfig::default()
        },
        9,
    )?;
    let model = AdaMorph::new(ModelConfig::desk(ds.robot_dofs()), 9)?;
    let config = TrainConfig {
        total_steps: 150,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, fit_stats(&ds)?, config, 9, dataset_fingerprint(&ds))?;
    let data = RoundRobin::new(&ds.train, ds.robots.len(), t.config.batch_size, 9)?;
    t.run_until(&data, usize::MAX, |_, _| Ok(()))?;

    let source = std::slice::from_ref(&ds.test[0]);
    for robot in 0..ds.robots.len() {
        let pred = predict_for(&t.model, &t.stats, source, Some(robot))?.remove(0);
        let end = pred.p.len() - 1;
        println!(
            "robot {robot}: {} joints per frame, final base position {:.3?} (oracle {:.3?})",
            pred.target.dof,
            pred.p[end].as_slice(),
            source[0].p[end].as_slice()
        );
    }
    Ok(())
}
