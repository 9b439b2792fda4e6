#![no_main]
use blurfield::MotionField;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(field) = MotionField::decode(data) {
        let again = MotionField::decode(&field.encode()).expect("re-encoded field decodes");
        assert_eq!(again.dims(), field.dims());
    }
});
