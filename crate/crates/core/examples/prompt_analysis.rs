//! Cosine similarity and PCA of robot prompt banks.
//!
//! `cargo run --release --example prompt_analysis -- [checkpoint]`
//! analyses a trained checkpoint; without one, a fresh model is used.

use adamorph::evaluation::{family_medians, prompt_cosine_matrix, prompt_pca_2d};
use adamorph::model::{AdaMorph, ModelConfig};
use adamorph::synth::make_embodiments;
use adamorph::trainer::checkpoint;

fn main() -> adamorph::Result<()> {
    let robots = make_embodiments(7, 2, 3);
    let model = match std::env::args().nth(1) {
        Some(path) => checkpoint::load_model(path.as_ref())?.0,
        None => AdaMorph::new(ModelConfig::desk(robots.iter().map(|r| r.dof).collect()), 7)?,
    };
    let sim = prompt_cosine_matrix(&model)?;
    for row in &sim {
        println!("{}", row.iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>().join(" "));
    }
    let families: Vec<usize> = robots.iter().map(|r| r.family).take(sim.len()).collect();
    let (within, across) = family_medians(&sim, &families);
    println!("median similarity within family {within:?}, across {across:?}");
    for p in prompt_pca_2d(&model, 0)?.iter().filter(|p| p.token == 0) {
        println!("robot {} token 0 at ({:+.4}, {:+.4})", p.robot, p.x, p.y);
    }
    Ok(())
}
