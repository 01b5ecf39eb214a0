use std::path::Path;

use amm_core::experiment::{MnistConfig, SweepConfig, ToyConfig, TrendConfig};
use amm_core::regularizer::{Aggregation, Shrinkage};

fn read(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn every_shipped_config_parses() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        let text = read(&name);
        let parsed = match name.as_str() {
            n if n.starts_with("toy-") => toml::from_str::<ToyConfig>(&text).map(|_| ()),
            n if n.ends_with("-sweep.toml") => toml::from_str::<SweepConfig>(&text).map(|_| ()),
            "less-data.toml" | "noisy-labels.toml" => toml::from_str::<TrendConfig>(&text).map(|_| ()),
            _ => toml::from_str::<MnistConfig>(&text).map(|_| ()),
        };
        parsed.unwrap_or_else(|e| panic!("{name}: {e}"));
        seen += 1;
    }
    assert!(seen >= 7);
}

#[test]
fn smoke_configs_differ_only_in_the_regularizer() {
    let base: MnistConfig = toml::from_str(&read("smoke-baseline.toml")).unwrap();
    let amm: MnistConfig = toml::from_str(&read("smoke-amm.toml")).unwrap();
    assert_eq!(base.regularizer.lambda, 0.0);
    assert!(amm.regularizer.lambda > 0.0);
    assert_eq!(base.train, amm.train);
    assert_eq!(base.dataset, amm.dataset);
}

#[test]
fn sweep_config_expands_to_its_grid() {
    let sweep: SweepConfig = toml::from_str(&read("smoke-sweep.toml")).unwrap();
    assert_eq!(sweep.variants[0], (Aggregation::Min, Shrinkage::Exp));
    assert_eq!(sweep.cells().len(), 1 + 2 * 3);
    assert_eq!(sweep.base.validation_size, 2000);
}
