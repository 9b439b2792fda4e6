#![no_main]
use blurfield::fuse::ConfidenceVolume;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Checks that arbitrary bytes never panic the decoder.
    if let Ok(vol) = ConfidenceVolume::decode(data) {
        let _ = vol.argmax_field();
    }
});
