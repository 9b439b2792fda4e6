#![no_main]
use blurfield::deconv::GmmPrior;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(prior) = GmmPrior::decode(data) {
        assert_eq!(prior.encode(), data);
    }
});
