#![no_main]
use libfuzzer_sys::fuzz_target;
use nac::data::Dataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ds) = Dataset::parse_csv("fuzz", text) {
            let again = Dataset::parse_csv("fuzz", &ds.to_csv()).expect("own output parses");
            assert_eq!(again.labels, ds.labels);
            assert_eq!(again.to_csv(), ds.to_csv());
        }
    }
});
