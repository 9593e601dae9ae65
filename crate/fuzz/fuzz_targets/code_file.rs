#![no_main]
use libfuzzer_sys::fuzz_target;
use nac::analysis::Codebook;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(book) = Codebook::parse(text) {
            let again = Codebook::parse(&book.to_text()).expect("own output parses");
            assert_eq!(again.codes(), book.codes());
        }
    }
});
