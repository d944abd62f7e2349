#![no_main]

use libfuzzer_sys::fuzz_target;
use zsseg::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // must never panic; valid configs must survive a serialize/parse cycle
    if let Ok(cfg) = ExperimentConfig::parse_str(text) {
        let round = ExperimentConfig::parse_str(&cfg.to_config_string())
            .expect("serialized config failed to reparse");
        assert_eq!(round.to_config_string(), cfg.to_config_string());
    }
});
