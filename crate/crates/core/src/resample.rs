//! Image crop/resize and response-map upsampling.
//!
//! Training and tracking share one crop routine so both see identical
//! geometry: a square window in frame coordinates is sampled bilinearly
//! into a fixed-size tensor, out-of-frame area taking the frame's mean
//! intensity.

use crate::scalar::{cast, Scalar};
use crate::sequence::Frame;
use crate::tensor::Tensor;

/// Mean intensity of a frame in [0, 255].
pub fn frame_mean(frame: &Frame) -> f64 {
    if frame.data.is_empty() {
        return 0.0;
    }
    frame.data.iter().map(|&v| v as f64).sum::<f64>() / frame.data.len() as f64
}

fn sample_bilinear(frame: &Frame, x: f64, y: f64, fill: f64) -> f64 {
    let (w, h) = (frame.width as isize, frame.height as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let px = |ix: isize, iy: isize| -> f64 {
        if ix < 0 || iy < 0 || ix >= w || iy >= h {
            fill
        } else {
            frame.data[(iy as usize) * frame.width + ix as usize] as f64
        }
    };
    let (x0, y0) = (x0 as isize, y0 as isize);
    let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
    let bot = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Sample a square crop of side `side` frame pixels centered at `center`
/// into a [1, out, out] tensor scaled to [0, 1]. Pixel centers sit at
/// integer + 0.5 coordinates.
pub fn crop_to_tensor<S: Scalar>(
    frame: &Frame,
    center: (f64, f64),
    side: f64,
    out: usize,
) -> Tensor<S> {
    let fill = frame_mean(frame);
    let step = side / out as f64;
    let origin_x = center.0 - side / 2.0;
    let origin_y = center.1 - side / 2.0;
    let mut data = Vec::with_capacity(out * out);
    for oy in 0..out {
        let sy = origin_y + (oy as f64 + 0.5) * step - 0.5;
        for ox in 0..out {
            let sx = origin_x + (ox as f64 + 0.5) * step - 0.5;
            data.push(cast::<S>(sample_bilinear(frame, sx, sy, fill) / 255.0));
        }
    }
    Tensor::new(vec![1, out, out], data).expect("crop shape")
}

fn cubic_kernel(t: f64) -> f64 {
    // Catmull-Rom spline, interpolating at the knots.
    let a = -0.5;
    let t = t.abs();
    if t < 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        (((t - 5.0) * t + 8.0) * t - 4.0) * a
    } else {
        0.0
    }
}

/// Bicubic upsampling of a 2-D map by an integer factor; output grid is
/// ((m-1)*factor + 1) x ((n-1)*factor + 1) and matches the input exactly
/// at original grid points.
pub fn bicubic_upsample<S: Scalar>(map: &Tensor<S>, factor: usize) -> Tensor<S> {
    assert_eq!(map.shape().len(), 2, "bicubic_upsample expects a 2-D map");
    let (m, n) = (map.shape()[0], map.shape()[1]);
    let (om, on) = ((m - 1) * factor + 1, (n - 1) * factor + 1);
    let get = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, m as isize - 1) as usize;
        let c = c.clamp(0, n as isize - 1) as usize;
        map.at2(r, c).to_f64().unwrap()
    };
    let mut data = Vec::with_capacity(om * on);
    for oy in 0..om {
        let sy = oy as f64 / factor as f64;
        let y0 = sy.floor() as isize;
        let fy = sy - y0 as f64;
        for ox in 0..on {
            let sx = ox as f64 / factor as f64;
            let x0 = sx.floor() as isize;
            let fx = sx - x0 as f64;
            let mut acc = 0.0;
            for dy in -1..=2isize {
                let wy = cubic_kernel(fy - dy as f64);
                if wy == 0.0 {
                    continue;
                }
                for dx in -1..=2isize {
                    let wx = cubic_kernel(fx - dx as f64);
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wy * wx * get(y0 + dy, x0 + dx);
                }
            }
            data.push(cast::<S>(acc));
        }
    }
    Tensor::new(vec![om, on], data).expect("upsample shape")
}
