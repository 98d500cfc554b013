#![no_main]

use libfuzzer_sys::fuzz_target;
use mbkd::trainer::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = Checkpoint::decode(data) else {
        return;
    };
    let _ = ckpt.meta_parse::<usize>("epoch");
    let _ = ckpt.meta_parse::<u64>("rng_word_pos");
    let again = Checkpoint::decode(&ckpt.encode()).expect("re-encoded checkpoint decodes");
    assert_eq!(again.meta, ckpt.meta);
    assert_eq!(again.tensors.encode(), ckpt.tensors.encode());
});
