#![no_main]
use libfuzzer_sys::fuzz_target;
use lore_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_json(text) {
            let dumped = cfg.to_json().unwrap();
            assert_eq!(RunConfig::from_json(&dumped).unwrap(), cfg);
        }
    }
});
