#![no_main]
use libfuzzer_sys::fuzz_target;
use nac::model::EncoderModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(model) = EncoderModel::from_json(text) {
            let json = model.to_json();
            let again = EncoderModel::from_json(&json).expect("own output parses");
            assert_eq!(again.to_json(), json);
        }
    }
});
