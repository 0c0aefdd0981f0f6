use zsdet::boxes::BBox;
use zsdet::scene::RgbImage;

const OUTLINE: [u8; 3] = [255, 0, 0];

/// Copy of `image` with a one-pixel outline around each box (pixel units).
pub fn outline_boxes(image: &RgbImage, boxes: &[BBox]) -> RgbImage {
    let mut out = image.clone();
    let n = image.size as i64;
    let mut put = |x: i64, y: i64| {
        if (0..n).contains(&x) && (0..n).contains(&y) {
            let i = 3 * (y * n + x) as usize;
            out.data[i..i + 3].copy_from_slice(&OUTLINE);
        }
    };
    for b in boxes {
        let (x0, y0, x1, y1) = b.corners();
        let (x0, y0) = (x0.round() as i64, y0.round() as i64);
        let (x1, y1) = (x1.round() as i64 - 1, y1.round() as i64 - 1);
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
    out
}
