#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = vtedit::diffusion::ConceptBook::from_bytes(data);
    let _ = vtedit::diffusion::Denoiser::from_bytes(data);
    let _ = vtedit::diffusion::AutoencoderPair::from_bytes(data);
    let _ = vtedit::avatar::DynamicAvatar::from_bytes(data);
});
