#![allow(dead_code)]

use std::path::{Path, PathBuf};

use reasonrec::datasets::{self, FilterConfig, Format, LoadOptions, SplitDataset};
use reasonrec::pipeline::RunConfig;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic")
}

/// The shipped fixture run configuration, writing under `out`.
pub fn fixture_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_file(&fixture_dir().join("run.toml")).expect("fixture config");
    cfg.out_dir = out.to_path_buf();
    cfg
}

pub fn fixture_split() -> SplitDataset {
    let cfg = fixture_config(Path::new("unused"));
    let loaded = datasets::load_ratings(&cfg.data.ratings, Format::MovielensDat, &LoadOptions::default()).unwrap();
    let kept = datasets::filter(&loaded.interactions, &FilterConfig { ..cfg.filter });
    datasets::leave_one_out_split(&kept, &loaded.catalog)
}
