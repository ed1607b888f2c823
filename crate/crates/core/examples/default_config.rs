//! Print the built-in experiment configuration as TOML, ready to be
//! saved, edited, and passed back via `--config`.

fn main() {
    let cfg = taskdistill_core::harness::ExperimentConfig::default();
    print!(
        "{}",
        toml::to_string_pretty(&cfg).expect("default config serializes")
    );
}
