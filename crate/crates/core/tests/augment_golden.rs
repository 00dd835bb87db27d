//! Golden outputs of every augmentation on a fixed rendered input. A
//! change in any hash means augmentation behaviour changed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rotkit::augment::{apply_aug, pose_mosaic, weak_augment, AugKind, AugOp, AugPool, ImageTensor};
use rotkit::data::{render_sample, RenderConfig};
use rotkit::so3::Rotation;
use sha2::{Digest, Sha256};

const GOLDEN: [(&str, &str); 19] = [
    ("input", "b46506bddc0c6ffe6f7aa5a27b7b9c8ecc2bc94adb64cf9628bb695157ed5af8"),
    ("invert", "decbe973eaab8bdbe68a432f92a9a5be8b188a9b8d0de13bbef36c3ce8702a73"),
    ("rotate", "2e5364b9185d28fc2e70cc58fb750c3deb69c5d1c6fa15487cd4563b6b07ccb5"),
    ("brightness", "bcd60d202cbf746bbacfb0ba434f31260b3924ac7a7fd518e4c79b7aeb7c68d7"),
    ("shearX", "c1465c797fab3c6848bb8f80dac3aa1888ba5d2f9dcab97d2c4c9f579ba449b3"),
    ("shearY", "503b36da81cdd73a37aa88c551cae1ecd010eba6c1b284a02e0e0f17b45912a1"),
    ("translateX", "45bc9d88ee92ffa6e13cf093f45d87ba54e33b6923df63f2cc6f50f7952e111a"),
    ("translateY", "a64830504957c787b0f98cb0509160d92088e1fd70df0200c1a769ae8cda6c3f"),
    ("contrast", "8996894fdda5ac1748c75380c3603be0c5c504c94c29877cc1f5211586267009"),
    ("color", "abcec7666911f4792287e4397f9562fd70b1a2d3ac5277d1d6c7f32c6d499c9a"),
    ("cutout", "23b9ff9733870d126e16e2cedf5d93e22423507da6dfffb2d9d5b658b5b82a2f"),
    ("equalize", "e73b8d4f778fa1a6077d6202986e5af0147cb427934c132464b7e8c33dd641c0"),
    ("flip", "1bdae7e970077f16556428dad859c097c35109a26a3257a6aaf71c127ba14e28"),
    ("posterize", "04f4c8031b475832830b2836ba92f3372d72a5a701f0a85b2be8d5f04af77db3"),
    ("sharpness", "734309d3264948b4355727aa34c19137e12fc2621c7bff2ea14a015ab5c94811"),
    ("solarize", "fd39d626c4a35a16a0225b26ea6f76f8583fab582fbe143822e01d70ddde1ddc"),
    ("solarizeAdd", "f0f4627871baf49865983c8a696416932994b7fb2fd7012b0a5c5187cbd94793"),
    ("mosaic5", "4640ae69ec4f6f5e90d976f6bb6d5b5f1a1915d6a05c4a3a2680fa5b29ce4abf"),
    ("weak", "9b9e6ae2d6a4c0ba5c730c4e0727a6139c45de22c73c7e65641999ee8f86aac9"),
];

fn input() -> ImageTensor {
    let r = Rotation::about_x(0.6).compose(&Rotation::about_z(1.1));
    let img = render_sample(0, &r, RenderConfig { width: 32, height: 32 });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("in.png");
    img.save_png(&path).unwrap();
    let back = ImageTensor::load_png(&path).unwrap();
    assert_eq!(back, img);
    back
}

fn digest(img: &ImageTensor) -> String {
    Sha256::digest(img.data()).iter().map(|b| format!("{b:02x}")).collect()
}

fn outputs() -> Vec<(String, String)> {
    let img = input();
    let mut out = vec![("input".to_string(), digest(&img))];
    for kind in AugKind::ALL {
        let aug = apply_aug(AugOp::new(kind, 0.7).unwrap(), &img, &mut ChaCha8Rng::seed_from_u64(42));
        out.push((kind.name().to_string(), digest(&aug)));
    }
    let mosaic = pose_mosaic(&img, 5, &AugPool::selected7(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    out.push(("mosaic5".into(), digest(&mosaic)));
    out.push(("weak".into(), digest(&weak_augment(&img, &mut ChaCha8Rng::seed_from_u64(3)))));
    out
}

#[test]
fn augmentation_outputs_match_golden_hashes() {
    let got = outputs();
    assert_eq!(got.len(), GOLDEN.len());
    for ((name, hash), (g_name, g_hash)) in got.iter().zip(GOLDEN) {
        assert_eq!((name.as_str(), hash.as_str()), (g_name, g_hash));
    }
}
