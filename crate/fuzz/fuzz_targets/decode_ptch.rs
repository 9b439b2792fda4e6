#![no_main]
use blurfield::synth::PatchDataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = PatchDataset::decode(data) {
        assert_eq!(ds.encode(), data);
        for i in 0..ds.len().min(4) {
            let _ = ds.patch(i);
        }
    }
});
