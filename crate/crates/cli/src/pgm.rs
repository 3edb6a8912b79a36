//! Binary greyscale image grids.

use dmmia_core::data::SIDE;

/// Tiles 28×28 images (values in [0, 1], row-major) into a P5 PGM, `cols`
/// per row, with 1-px black separators between tiles.
pub fn render_grid(images: &[&[f64]], cols: usize) -> Vec<u8> {
    assert!(!images.is_empty(), "render_grid needs at least one image");
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let width = cols * SIDE + cols - 1;
    let height = rows * SIDE + rows - 1;
    let mut pixels = vec![0u8; width * height];
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.len(), SIDE * SIDE, "image {i} is not 28×28");
        let (x0, y0) = ((i % cols) * (SIDE + 1), (i / cols) * (SIDE + 1));
        for y in 0..SIDE {
            for x in 0..SIDE {
                pixels[(y0 + y) * width + x0 + x] = (255.0 * img[y * SIDE + x].clamp(0.0, 1.0)).round() as u8;
            }
        }
    }
    let mut out = format!("P5 {width} {height} 255\n").into_bytes();
    out.extend(pixels);
    out
}
