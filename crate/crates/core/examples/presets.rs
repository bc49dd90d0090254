//! Writes every built-in experiment preset as TOML into a directory
//! (default `configs/`), as starting points for `dmcm train --config`.

use std::path::PathBuf;

use dmcm_core::experiments::{a1, a3_zeroshot, b1, b1_maml, b4_param, Exclusion, ExperimentConfig, NContext};
use dmcm_core::meta::Method;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "configs".into()));
    std::fs::create_dir_all(&dir)?;
    let mut presets: Vec<(String, ExperimentConfig)> = Vec::new();
    for m in [Method::Maml, Method::Anil, Method::Cavia, Method::Dmcm] {
        presets.push((format!("sine2-{m}"), a1(m, 10, Exclusion::None {})));
    }
    presets.push((
        "sine2-dmcm-ood60".into(),
        a1(Method::Dmcm, 10, Exclusion::Fraction { fraction: 0.6 }),
    ));
    presets.push(("sine2-zeroshot".into(), a3_zeroshot()));
    for (i, layout) in NContext::ALL.into_iter().enumerate() {
        presets.push((format!("sine3-ctx{}", i + 1), b1(layout, false)));
    }
    presets.push(("sine3-maml".into(), b1_maml()));
    presets.push(("sine3-param3".into(), b4_param(3)));
    for (name, cfg) in presets {
        let path = dir.join(format!("{name}.toml"));
        std::fs::write(&path, toml::to_string(&cfg)?)?;
        println!("{}", path.display());
    }
    Ok(())
}
