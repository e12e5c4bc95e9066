//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use imloc::loss::Mask;

/// Area-majority downsampling by direct counting.
pub fn area_majority(m: &Mask, f: usize) -> Vec<u8> {
    let (h, w) = (m.height() / f, m.width() / f);
    let mut out = Vec::new();
    for cy in 0..h {
        for cx in 0..w {
            let mut n = 0;
            for y in cy * f..(cy + 1) * f {
                for x in cx * f..(cx + 1) * f {
                    n += usize::from(m.get(y, x));
                }
            }
            out.push(u8::from(2 * n >= f * f));
        }
    }
    out
}

/// Boundary band by direct window search with clamped coordinates.
pub fn band(bits: &[u8], h: usize, w: usize, r: usize) -> Vec<u8> {
    let mut out = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut lo, mut hi) = (1u8, 0u8);
            for dy in -(r as isize)..=r as isize {
                for dx in -(r as isize)..=r as isize {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    lo = lo.min(bits[yy * w + xx]);
                    hi = hi.max(bits[yy * w + xx]);
                }
            }
            out[y * w + x] = u8::from(lo != hi);
        }
    }
    out
}

/// Mean of `-[y ln p + (1 - y) ln(1 - p)]` over selected pixels, 0 if none.
pub fn mean_bce(logits: &[f64], target: &[u8], select: &[u8]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for ((&z, &y), &s) in logits.iter().zip(target).zip(select) {
        if s == 1 {
            let p = 1.0 / (1.0 + (-z).exp());
            sum -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// AUC by enumerating every positive/negative pair.
pub fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut half_units = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            neg += 1;
            continue;
        }
        pos += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if !lj {
                half_units += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    half_units as f64 / (2.0 * pos as f64 * neg as f64)
}
