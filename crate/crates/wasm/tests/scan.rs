use fringeforge_wasm::scan_face_impl;

#[test]
fn face_scan_matches_the_surface() {
    let scan = scan_face_impl(4, 0).unwrap();
    assert!(scan.points() > 500);
    assert!(scan.max_error_mm() < 0.05, "{}", scan.max_error_mm());
    let depth = scan.depth();
    assert_eq!(depth.rgba().len(), depth.width() * depth.height() * 4);
    let opaque = depth.rgba().chunks(4).filter(|px| px[3] == 255).count();
    assert_eq!(opaque, scan.points());
    let ply = scan.ply();
    assert!(ply.starts_with("ply\n"));
    assert!(ply.contains(&format!("element vertex {}", scan.points())));
}

#[test]
fn expressions_change_the_scan() {
    let neutral = scan_face_impl(4, 0).unwrap();
    let smiling = scan_face_impl(4, 3).unwrap();
    assert_ne!(neutral.ply(), smiling.ply());
}
