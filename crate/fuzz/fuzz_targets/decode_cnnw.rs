#![no_main]
use blurfield::predict::CnnModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = CnnModel::decode(data) {
        assert_eq!(model.encode(), data);
    }
});
