#![no_main]

use libfuzzer_sys::fuzz_target;
use mbkd::data::Dataset;
use mbkd::tensor::container::NamedTensors;

fuzz_target!(|data: &[u8]| {
    let Ok(container) = NamedTensors::decode(data) else {
        return;
    };
    // Accepted input must re-encode to the same bytes.
    assert_eq!(container.encode(), data);
    let _ = Dataset::from_container(&container);
});
