#![no_main]
use libfuzzer_sys::fuzz_target;
use nac::config::TrainConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = TrainConfig::parse(text) {
            let again = TrainConfig::parse(&cfg.to_text()).expect("own output parses");
            assert_eq!(again.to_text(), cfg.to_text());
        }
    }
});
