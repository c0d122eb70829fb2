#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use pavi_cli::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = ExperimentConfig::from_json(text, Path::new("/")) {
        let json = serde_json::to_string(&config).expect("config serializes");
        let back = ExperimentConfig::from_json(&json, Path::new("/")).expect("serialized config reparses");
        assert_eq!(back.hash().ok(), config.hash().ok());
        let _ = config.series();
    }
});
