#![no_main]

use libfuzzer_sys::fuzz_target;
use zsseg::datagen::PointScene;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(scene) = PointScene::from_text(text) {
        let round = PointScene::from_text(&scene.to_text()).expect("round trip failed");
        assert_eq!(round, scene);
    }
});
