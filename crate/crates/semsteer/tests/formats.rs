use proptest::prelude::*;
use semsteer::io::{
    decode_pgm, decode_png, encode_pgm, encode_png, loss_curve_csv, quantized, read_dataset, score_curves_csv,
    write_dataset, IoError, INDEX_FILE,
};
use semsteer_core::shapeworld::{sample_attribute_dataset_sized, AttributeId};
use semsteer_core::GrayImage;

fn ramp(w: usize, h: usize) -> GrayImage {
    let pixels = (0..w * h).map(|i| i as f64 / (w * h - 1) as f64).collect();
    GrayImage::from_pixels(w, h, pixels).unwrap()
}

#[test]
fn pgm_header_is_binary_graymap() {
    let bytes = encode_pgm(&ramp(3, 2));
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(bytes.len(), 11 + 6);
    assert_eq!(bytes[11], 0);
    assert_eq!(bytes[16], 255);
}

#[test]
fn pgm_round_trip_equals_quantized_image() {
    let img = ramp(7, 5);
    let back = decode_pgm(&encode_pgm(&img)).unwrap();
    assert!(back.bit_eq(&quantized(&img)));
    // Quantized images are fixed points.
    assert_eq!(encode_pgm(&back), encode_pgm(&img));
}

#[test]
fn pgm_comments_and_small_maxval_are_accepted() {
    let img = decode_pgm(b"P5 # made by hand\n2 1\n# maxval next\n4\n\x00\x04").unwrap();
    assert_eq!(img.pixels(), &[0.0, 1.0]);
}

#[test]
fn malformed_pgm_is_rejected() {
    for bad in [
        &b"P2\n1 1\n255\n\x00"[..],
        b"P5\n2 2\n255\n\x00",
        b"P5\n1 1\n65535\n\x00\x00",
        b"P5\n1",
        b"P5\n0 1\n255\n",
    ] {
        assert!(matches!(decode_pgm(bad), Err(IoError::Pgm(_))), "{:?}", String::from_utf8_lossy(bad));
    }
}

#[test]
fn png_round_trip_and_fixed_bytes() {
    let img = ramp(9, 4);
    let a = encode_png(&img);
    assert_eq!(&a[1..4], b"PNG");
    assert_eq!(a, encode_png(&img));
    assert!(decode_png(&a).unwrap().bit_eq(&quantized(&img)));
    assert!(matches!(decode_png(b"not a png"), Err(IoError::Png(_))));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let evil = sample_attribute_dataset_sized(AttributeId::Evil, 3, 9, 16).unwrap();
    let dense = sample_attribute_dataset_sized(AttributeId::Dense, 2, 9, 16).unwrap();
    let paths = write_dataset(dir.path(), &evil).unwrap();
    write_dataset(dir.path(), &dense).unwrap();
    assert_eq!(paths[0].file_name().unwrap(), "evil_00000.pgm");
    assert!(dir.path().join(INDEX_FILE).exists());

    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 5);
    // Attribute order, then file order.
    let expected: Vec<_> = dense.iter().chain(&evil).collect();
    for (b, e) in back.iter().zip(expected) {
        assert_eq!(b.attribute, e.attribute);
        assert_eq!(b.spec, e.spec);
        assert!(b.pixels.bit_eq(&quantized(&e.pixels)));
    }
}

#[test]
fn empty_dataset_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(IoError::EmptyDataset(_))));
}

#[test]
fn csv_tables() {
    let loss = String::from_utf8(loss_curve_csv(&[0.5, 0.25]).unwrap()).unwrap();
    assert_eq!(loss, "step,loss\n0,0.5\n1,0.25\n");
    let curves = score_curves_csv(&[-0.1, 0.1], &[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap();
    assert_eq!(
        String::from_utf8(curves).unwrap(),
        "alpha,seed_0,seed_1\n-0.1,0.1,0.3\n0.1,0.2,0.4\n"
    );
}

proptest! {
    #[test]
    fn eight_bit_images_survive_both_formats(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let bytes: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
        let img = GrayImage::from_u8(w, h, &bytes).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap().quantized_u8(), bytes.clone());
        prop_assert_eq!(decode_png(&encode_png(&img)).unwrap().quantized_u8(), bytes);
    }
}
