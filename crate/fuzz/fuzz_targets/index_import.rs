#![no_main]
use libfuzzer_sys::fuzz_target;
use nac::codes::HashIndex;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(index) = HashIndex::import(text) {
            let again = HashIndex::import(&index.export()).expect("own output parses");
            assert_eq!(again.export(), index.export());
        }
    }
});
