#![no_main]

use libfuzzer_sys::fuzz_target;
use mbkd::data::{decode_cifar, CifarVariant, CIFAR_PIXELS};

fuzz_target!(|data: &[u8]| {
    for variant in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
        if let Ok((pixels, labels)) = decode_cifar(data, variant) {
            assert_eq!(pixels.len(), labels.len() * CIFAR_PIXELS);
            assert!(labels.iter().all(|&y| y < variant.num_classes()));
            assert!(pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
});
