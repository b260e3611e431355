use hybridsplat::io::{load_camera, load_scene, read_image, save_scene, write_image};
use hybridsplat::math::Vec3;
use hybridsplat::synth::{default_view, gen_mirror_probe, gen_random, Bounds};
use hybridsplat::{render, CameraView, Renderer};

#[test]
fn binary_and_json_files_render_identically() {
    let dir = tempfile::tempdir().unwrap();
    let bounds = Bounds::cube(1.0);
    let scene = gen_random(21, 60, 20, &bounds);
    let bin = dir.path().join("s.hspl");
    let json = dir.path().join("s.json");
    save_scene(&scene, &bin).unwrap();
    save_scene(&scene, &json).unwrap();
    assert_eq!(&std::fs::read(&bin).unwrap()[..4], b"HSPL");
    let a = load_scene(&bin).unwrap();
    let b = load_scene(&json).unwrap();
    assert_eq!(a, scene);
    assert_eq!(b, scene);

    let r = Renderer::with_threads(1).unwrap();
    let view = default_view(&bounds, 32, 32);
    let ia = render(&r, &a, &view).unwrap().final_color;
    let ib = render(&r, &b, &view).unwrap().final_color;
    assert_eq!(ia.max_abs_diff(&ib).unwrap(), 0.0);
}

#[test]
fn look_at_camera_matches_constructor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cam.json");
    std::fs::write(
        &path,
        r#"{"eye": [0, -3, 1], "target": [0, 0, 0], "up": [0, 0, 1], "focal": 80, "width": 64, "height": 48}"#,
    )
    .unwrap();
    let got = load_camera(&path).unwrap();
    let want = CameraView::look_at(
        Vec3::new(0.0, -3.0, 1.0),
        Vec3::zeros(),
        Vec3::z(),
        80.0,
        64,
        48,
    )
    .unwrap();
    assert_eq!(got, want);
}

#[test]
fn exported_png_round_trips_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, desc) = gen_mirror_probe(2, 1.0, Vec3::new(0.0, 0.25, 0.5));
    let view = hybridsplat::synth::mirror_view(&desc, 40, 40).unwrap();
    let img = render(&Renderer::with_threads(1).unwrap(), &scene, &view)
        .unwrap()
        .final_color;
    let path = dir.path().join("mirror.png");
    write_image(&img, &path, true).unwrap();
    let back = read_image(&path, true).unwrap();
    let clamped = hybridsplat::ChannelImage {
        data: img.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        ..img.clone()
    };
    assert!(back.max_abs_diff(&clamped).unwrap() < 0.01);
}

#[test]
fn truncated_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.hspl");
    save_scene(&gen_random(1, 5, 5, &Bounds::cube(1.0)), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = load_scene(&path).unwrap_err();
    assert_eq!(err.category(), "format");
}
