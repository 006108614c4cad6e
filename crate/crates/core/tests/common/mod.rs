use std::path::PathBuf;

use sacp::harness::{generate_synthetic, sample_split, size_map_pgm, SynthConfig};
use sacp::{run_pipeline, Role, SacpConfig, ScoreFunctionConfig};

pub const GOLDEN_MAP: &str = "size_map_24x20_k5.pgm";

pub fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(GOLDEN_MAP)
}

/// Seeded 24×20, K=5 fixture rendered as a set-size map, with its roles.
pub fn golden_size_map() -> (Vec<u8>, Vec<Role>) {
    let cfg = SynthConfig { height: 24, width: 20, num_classes: 5, noise_seed: 17, label_seed: 18, ..SynthConfig::default() };
    let (grid, labels) = generate_synthetic(&cfg).unwrap();
    let mask = sample_split(&labels, 40, 0.5, 23).unwrap();
    let (sets, _) =
        run_pipeline(&grid, &labels, &mask, &ScoreFunctionConfig::aps(), &SacpConfig::new(0.5, 2), 0.1, 29).unwrap();
    (size_map_pgm(&sets), mask.roles().to_vec())
}
