#![no_main]

use libfuzzer_sys::fuzz_target;
use mbkd::experiment::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(config) = ExperimentConfig::from_toml(text) else {
        return;
    };
    let _ = config.problems();
    let _ = config.hash();
    let back = ExperimentConfig::from_toml(&config.to_toml()).expect("serialized config parses");
    assert_eq!(back.hash(), config.hash());
});
