use flowattack::flowio::{decode_flo, read_flo, read_kitti_png, write_flo, write_kitti_png};
use flowattack::types::FlowField;
use flowattack::Error;

#[test]
fn single_pixel_flo_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("one.flo");
    write_flo(&p, &FlowField::from_fn(1, 1, |_, _| (1.5, -2.0))).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(bytes.len(), 20);
    assert_eq!(&bytes[..4], &202021.25f32.to_le_bytes());
    assert_eq!(&bytes[4..8], &1i32.to_le_bytes());
    assert_eq!(&bytes[12..16], &1.5f32.to_le_bytes());
    assert_eq!(&bytes[16..20], &(-2.0f32).to_le_bytes());
    assert_eq!(read_flo(&p).unwrap().get(0, 0), (1.5, -2.0));
}

#[test]
fn truncated_flo_reports_path_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.flo");
    let mut bytes = flowattack::flowio::encode_flo(&FlowField::zeros(2, 2));
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&p, &bytes).unwrap();
    match read_flo(&p) {
        Err(Error::Format { path, .. }) => assert_eq!(path, p),
        other => panic!("expected a format error, got {other:?}"),
    }
    assert!(decode_flo(b"PIEH", &p).is_err());
}

#[test]
fn kitti_png_raw_values_and_validity() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("flow.png");
    let flow = FlowField::from_fn(2, 3, |y, x| (x as f64, -(y as f64) * 0.5));
    let valid = [true, false, true, true, true, false];
    write_kitti_png(&p, &flow, Some(&valid)).unwrap();

    let raw = image::open(&p).unwrap().into_rgb16();
    // u = 1 maps to 1 * 64 + 32768.
    assert_eq!(raw.get_pixel(1, 0).0, [32832, 32768, 0]);
    assert_eq!(raw.get_pixel(0, 0).0[2], 1);

    let (back, back_valid) = read_kitti_png(&p).unwrap();
    assert_eq!(back_valid, valid);
    for y in 0..2 {
        for x in 0..3 {
            let (u, v) = back.get(y, x);
            let (eu, ev) = flow.get(y, x);
            assert!((u - eu).abs() < 1.0 / 64.0 && (v - ev).abs() < 1.0 / 64.0);
        }
    }
}
