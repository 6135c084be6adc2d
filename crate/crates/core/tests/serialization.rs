//! Weight files and PNG input/output.

use std::fs;

use pcarn_core::generator::{build_generator, Generator, ModelSpec};
use pcarn_core::imageio::{corpus_scan, load_png, save_png, ImageBuffer};
use pcarn_core::nn::InitScheme;
use pcarn_core::training::synthetic_image;
use pcarn_core::weights::{decode, encode, load_into, load_weights, save_weights};
use pcarn_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(tied: bool, seed: u64) -> Generator<f32> {
    let spec = ModelSpec {
        channels: 8,
        group: 4,
        efficient: true,
        tied,
        ..ModelSpec::pcarn()
    };
    build_generator(&spec, InitScheme::default(), seed).unwrap()
}

#[test]
fn weight_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for tied in [false, true] {
        let gen = model(tied, 7);
        let path = dir.path().join(format!("w{tied}.bin"));
        save_weights(&gen.store, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let back = load_weights::<f32>(&path).unwrap();
        assert_eq!(back.aliases(), gen.store.aliases());
        assert_eq!(tied, !back.aliases().is_empty());
        for ((na, ta), (nb, tb)) in gen.store.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb), "{na}");
        }
        assert_eq!(encode(&back), bytes);

        // Loading into a differently seeded model reproduces the outputs.
        let mut other = model(tied, 8);
        load_into(&mut other.store, &path).unwrap();
        let x = synthetic_image(12, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(gen.infer(&x, 2).unwrap(), other.infer(&x, 2).unwrap());
    }
}

#[test]
fn malformed_or_mismatched_weights_rejected() {
    let gen = model(true, 1);
    let bytes = encode(&gen.store);
    assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 3]), Err(Error::WeightFormat(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode::<f32>(&extra), Err(Error::WeightFormat(_))));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(decode::<f32>(&bad_magic), Err(Error::WeightFormat(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tied.bin");
    save_weights(&gen.store, &path).unwrap();
    let mut untied = model(false, 1);
    assert!(matches!(load_into(&mut untied.store, &path), Err(Error::WeightMismatch(_))));
    assert!(load_weights::<f32>(&dir.path().join("missing.bin")).is_err());
}

#[test]
fn png_round_trip_and_tensor_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let red = ImageBuffer::new(1, 1, vec![255, 0, 0]).unwrap();
    let path = dir.path().join("red.png");
    save_png(&red, &path).unwrap();
    let back = load_png(&path).unwrap();
    assert_eq!(back, red);
    let t = back.to_tensor::<f32>();
    assert_eq!(t.shape().dims(), [1, 3, 1, 1]);
    assert_eq!(t.data(), &[1.0, 0.0, 0.0]);

    let data: Vec<u8> = (0..7 * 5 * 3).map(|i| (i * 37 % 256) as u8).collect();
    let img = ImageBuffer::new(7, 5, data).unwrap();
    let path = dir.path().join("ramp.png");
    save_png(&img, &path).unwrap();
    let loaded = load_png(&path).unwrap();
    assert_eq!(loaded, img);
    let t = loaded.to_tensor::<f64>();
    for (v, &b) in t.data().iter().zip(&[img.pixel(0, 0)[0]]) {
        assert_eq!(*v, b as f64 / 255.0);
    }
    assert_eq!(ImageBuffer::from_tensor(&t).unwrap(), img);

    // Half rounds away from zero; out-of-range values clamp; NaN maps to 0.
    let odd = Tensor::<f64>::from_vec([1, 3, 1, 2], vec![0.5 / 255.0, 2.0, -1.0, f64::NAN, 1.5 / 255.0, 254.5 / 255.0]).unwrap();
    let q = ImageBuffer::from_tensor(&odd).unwrap();
    assert_eq!(q.pixel(0, 0), [1, 0, 2]);
    assert_eq!(q.pixel(1, 0), [255, 0, 255]);
}

fn write_raw_png(path: &std::path::Path, w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) {
    let file = fs::File::create(path).unwrap();
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w, h);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().unwrap();
    writer.write_image_data(data).unwrap();
}

#[test]
fn other_png_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let p16 = dir.path().join("deep.png");
    write_raw_png(&p16, 2, 2, png::ColorType::Rgb, png::BitDepth::Sixteen, &[0u8; 2 * 2 * 6]);
    match load_png(&p16) {
        Err(Error::Image { reason, .. }) => assert!(reason.contains("16"), "{reason}"),
        other => panic!("expected a bit-depth error, got {other:?}"),
    }
    let gray = dir.path().join("gray.png");
    write_raw_png(&gray, 2, 1, png::ColorType::Grayscale, png::BitDepth::Eight, &[10, 200]);
    assert_eq!(load_png(&gray).unwrap().data, vec![10, 10, 10, 200, 200, 200]);
    let rgba = dir.path().join("rgba.png");
    write_raw_png(&rgba, 1, 1, png::ColorType::Rgba, png::BitDepth::Eight, &[1, 2, 3, 4]);
    assert_eq!(load_png(&rgba).unwrap().data, vec![1, 2, 3]);
}

#[test]
fn corpus_scan_orders_and_skips() {
    let dir = tempfile::tempdir().unwrap();
    assert!(corpus_scan(dir.path(), 1).unwrap().is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for name in ["b.png", "a.png", "c.PNG"] {
        let img = ImageBuffer::from_tensor(&synthetic_image(16, &mut rng)).unwrap();
        save_png(&img, &dir.path().join(name)).unwrap();
    }
    let small = ImageBuffer::from_tensor(&synthetic_image(4, &mut rng)).unwrap();
    save_png(&small, &dir.path().join("d_small.png")).unwrap();
    fs::write(dir.path().join("broken.png"), b"\x89PNG not really").unwrap();
    fs::write(dir.path().join("notes.txt"), b"hello").unwrap();
    fs::create_dir(dir.path().join("sub")).unwrap();

    let corpus = corpus_scan(dir.path(), 8).unwrap();
    let names: Vec<_> = corpus
        .images
        .iter()
        .map(|r| r.path.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["a.png", "b.png", "c.PNG"]);
    let skipped: Vec<_> = corpus
        .skipped
        .iter()
        .map(|(p, _)| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(skipped, ["broken.png", "d_small.png", "notes.txt"]);
    assert!(corpus_scan(&dir.path().join("absent"), 1).is_err());
}
