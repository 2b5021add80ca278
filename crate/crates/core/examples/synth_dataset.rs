//! Builds a small synthetic dataset, writes it to disk and reads it back.

use adamorph::synth::{generate_dataset, read_dataset, write_dataset, DataConfig, Split};

fn main() -> adamorph::Result<()> {
    let config = DataConfig {
        train_windows: 40,
        val_windows: 8,
        test_windows: 8,
        zero_shot_windows: 8,
        ..DataConfig::default()
    };
    let ds = generate_dataset(&config, 42)?;
    for r in &ds.robots {
        println!("robot {} ({}) family {} with {} DoF", r.id, r.name, r.family, r.dof);
    }
    let dir = std::env::temp_dir().join("adamorph-synth-example");
    let manifest = write_dataset(&dir, &ds)?;
    for (name, entry) in &manifest.splits {
        println!("{name}: {} windows, checksum {}", entry.records, entry.checksum);
    }
    let back = read_dataset(&dir)?;
    assert_eq!(back.split(Split::Train), ds.split(Split::Train));
    let styles: std::collections::BTreeSet<_> = ds.zero_shot.iter().map(|w| w.style.name()).collect();
    println!("zero-shot styles: {styles:?}; data in {}", dir.display());
    Ok(())
}
