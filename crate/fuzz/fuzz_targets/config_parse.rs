#![no_main]

use libfuzzer_sys::fuzz_target;
use qbsde::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        // Anything accepted must survive a round trip unchanged.
        let again = RunConfig::parse(&cfg.to_toml()).expect("emitted config parses");
        assert_eq!(cfg, again);
    }
});
