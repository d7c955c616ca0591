use proptest::prelude::*;

use step_core::pixel_io::{
    decode_image, encode_image, generate_scene, read_image, read_label_map, write_image,
    write_label_map, Image, LabelMap, SceneSpec, ShapeKind,
};

fn image_strategy() -> impl Strategy<Value = Image> {
    (
        1usize..40,
        1usize..40,
        prop_oneof![Just(1usize), Just(3usize)],
    )
        .prop_flat_map(|(w, h, c)| {
            proptest::collection::vec(any::<u8>(), w * h * c)
                .prop_map(move |data| Image::new(w, h, c, data).unwrap())
        })
}

proptest! {
    #[test]
    fn encode_decode_round_trip(image in image_strategy()) {
        prop_assert_eq!(decode_image(&encode_image(&image)).unwrap(), image);
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        size: 64,
        num_classes: 5,
        num_shapes: 3,
        shape_kinds: vec![ShapeKind::Rectangle, ShapeKind::Disk],
        noise_sigma: 2.0,
        seed: 11,
    };
    let (image, gt) = generate_scene(&spec).unwrap();
    write_image(&image, dir.path().join("a.ppm")).unwrap();
    write_label_map(&gt, dir.path().join("a.pgm")).unwrap();
    assert_eq!(read_image(dir.path().join("a.ppm")).unwrap(), image);
    assert_eq!(read_label_map(dir.path().join("a.pgm")).unwrap(), gt);
    assert!(gt.labels().iter().all(|&l| (l as u32) < spec.num_classes));
}

#[test]
fn scenes_are_seed_deterministic() {
    let spec = SceneSpec {
        size: 48,
        num_classes: 4,
        num_shapes: 4,
        shape_kinds: vec![ShapeKind::Disk],
        noise_sigma: 3.0,
        seed: 5,
    };
    let a = generate_scene(&spec).unwrap();
    assert_eq!(a, generate_scene(&spec).unwrap());
    let b = generate_scene(&SceneSpec { seed: 6, ..spec }).unwrap();
    assert_ne!(a.0, b.0);
}

#[test]
fn header_comments_and_whitespace() {
    let bytes = b"P5 # gray\n2 # width\n 1\n255\n\x07\x09";
    let image = decode_image(bytes).unwrap();
    assert_eq!((image.width(), image.height(), image.channels()), (2, 1, 1));
    assert_eq!(image.data(), &[7, 9]);
    let labels = LabelMap::from_image(image).unwrap();
    assert_eq!(labels.get(1, 0), 9);
}

#[test]
fn malformed_input_rejected() {
    assert!(decode_image(b"P3\n1 1\n255\n0 0 0").is_err());
    assert!(decode_image(b"P6\n2 2\n255\n\x00\x00").is_err());
    assert!(decode_image(b"P5\n1 1\n65535\n\x00\x00").is_err());
    assert!(decode_image(b"").is_err());
}
