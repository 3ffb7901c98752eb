//! Binary PPM renders with detection boxes drawn on top.

use rdad::evaluation::Detection;
use rdad::Tensor;

const PALETTE: [[u8; 3]; 3] = [[230, 40, 40], [40, 200, 60], [40, 90, 230]];

pub fn annotated_ppm(image: &Tensor, dets: &[&Detection], min_score: f32) -> Vec<u8> {
    let s = image.shape();
    let (h, w) = (s.h, s.w);
    let mut px = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = if c < s.c { image.at(0, c, y, x) } else { 0.0 };
                px[3 * (y * w + x) + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    for d in dets.iter().filter(|d| d.score >= min_score) {
        let color = PALETTE[(d.class + PALETTE.len() - 1) % PALETTE.len()];
        let (x1, y1, x2, y2) = d.bbox.corners();
        let clampx = |v: f32| (v.round().max(0.0) as usize).min(w - 1);
        let clampy = |v: f32| (v.round().max(0.0) as usize).min(h - 1);
        let (x1, x2, y1, y2) = (clampx(x1), clampx(x2 - 1.0), clampy(y1), clampy(y2 - 1.0));
        let mut put = |x: usize, y: usize| px[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&color);
        for x in x1..=x2 {
            put(x, y1);
            put(x, y2);
        }
        for y in y1..=y2 {
            put(x1, y);
            put(x2, y);
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    out
}
