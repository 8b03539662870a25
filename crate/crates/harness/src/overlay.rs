//! Detection overlays: box outlines and `name score` labels drawn with a
//! built-in 5x7 bitmap font.

use spgnn_eval::DetectionRecord;
use spgnn_model::Image;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// Rows of a glyph, bit 4 is the leftmost column.
fn glyph(c: char) -> Option<[u8; GLYPH_H]> {
    Some(match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ' ' => [0; GLYPH_H],
        'a' => [0, 0, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E],
        'c' => [0, 0, 0x0E, 0x10, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F],
        'e' => [0, 0, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'i' => [0x04, 0, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'n' => [0, 0, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0, 0, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'r' => [0, 0, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0, 0, 0x0E, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0, 0, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0, 0, 0x11, 0x11, 0x11, 0x0A, 0x04],
        _ => return None,
    })
}

const PALETTE: [[f64; 3]; 6] = [
    [1.0, 1.0, 1.0],
    [1.0, 0.2, 0.2],
    [0.2, 0.9, 0.2],
    [0.3, 0.5, 1.0],
    [1.0, 0.8, 0.1],
    [0.9, 0.3, 0.9],
];

fn fill(img: &mut Image, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [f64; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            img.set(y as usize, x as usize, rgb);
        }
    }
}

/// Draw `text` with its top-left corner at `(x, y)`. Unknown characters are
/// drawn as hollow boxes.
pub fn draw_text(img: &mut Image, x: i64, y: i64, text: &str, rgb: [f64; 3]) {
    for (i, ch) in text.chars().enumerate() {
        let ox = x + (i * (GLYPH_W + 1)) as i64;
        let rows = glyph(ch.to_ascii_lowercase()).unwrap_or([0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F]);
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..GLYPH_W {
                if bits & (0x10 >> c) != 0 {
                    let (px, py) = (ox + c as i64, y + r as i64);
                    fill(img, px, py, px + 1, py + 1, rgb);
                }
            }
        }
    }
}

/// Copy of `image` with every detection outlined and labelled.
pub fn render_overlay(image: &Image, dets: &[DetectionRecord], name: impl Fn(u64) -> String) -> Image {
    let mut img = image.clone();
    for d in dets {
        let color = PALETTE[d.category_id as usize % PALETTE.len()];
        let b = d.corner_box();
        let (x0, y0) = (b.x1.floor() as i64, b.y1.floor() as i64);
        let (x1, y1) = (b.x2.ceil() as i64, b.y2.ceil() as i64);
        fill(&mut img, x0, y0, x1, y0 + 2, color);
        fill(&mut img, x0, y1 - 2, x1, y1, color);
        fill(&mut img, x0, y0, x0 + 2, y1, color);
        fill(&mut img, x1 - 2, y0, x1, y1, color);
        let label = format!("{} {:.2}", name(d.category_id), d.score);
        let lw = (label.chars().count() * (GLYPH_W + 1) + 1) as i64;
        let ly = if y0 >= (GLYPH_H + 2) as i64 { y0 - (GLYPH_H + 2) as i64 } else { y0 + 2 };
        fill(&mut img, x0, ly, x0 + lw, ly + (GLYPH_H + 2) as i64, color);
        draw_text(&mut img, x0 + 1, ly + 1, &label, [0.0, 0.0, 0.0]);
    }
    img
}
