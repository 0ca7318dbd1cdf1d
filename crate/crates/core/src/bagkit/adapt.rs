use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Adapts an image instance to a target `[channels, height, width]`:
/// channels first (RGB→gray by luminance, gray→RGB by replication), then
/// half-pixel-centred bilinear resampling, then clamping to [0, 1].
pub fn adapt_instance<T: Element>(x: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    if x.ndim() != 3 {
        return Err(Error::Contract(format!(
            "adapt_instance expects an image c×h×w, got shape {:?}",
            x.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let [tc, th, tw] = target;
    let plane = h * w;
    let data = x.data();
    let channels: Vec<Vec<T>> = match (c, tc) {
        (a, b) if a == b => (0..c).map(|i| data[i * plane..(i + 1) * plane].to_vec()).collect(),
        (3, 1) => {
            let k = |v: f64| T::from_f64_lossy(v);
            let gray = (0..plane)
                .map(|p| k(0.299) * data[p] + k(0.587) * data[plane + p] + k(0.114) * data[2 * plane + p])
                .collect();
            vec![gray]
        }
        (1, 3) => vec![data.to_vec(); 3],
        _ => {
            return Err(Error::Dimension(format!(
                "cannot adapt {c} channels to {tc}"
            )))
        }
    };
    if th == 0 || tw == 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "cannot resize {h}×{w} to {th}×{tw}"
        )));
    }
    let mut out = Vec::with_capacity(tc * th * tw);
    for ch in &channels {
        resize_bilinear(ch, h, w, th, tw, &mut out);
    }
    out.iter_mut()
        .for_each(|v| *v = v.max(T::zero()).min(T::one()));
    Tensor::new(vec![tc, th, tw], out)
}

/// Source coordinate and interpolation weight for one output index.
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, s - lo as f64)
}

fn resize_bilinear<T: Element>(src: &[T], h: usize, w: usize, th: usize, tw: usize, out: &mut Vec<T>) {
    if h == th && w == tw {
        out.extend_from_slice(src);
        return;
    }
    let cols: Vec<_> = (0..tw).map(|x| source_coord(x, w, tw)).collect();
    for y in 0..th {
        let (y0, y1, fy) = source_coord(y, h, th);
        let fy = T::from_f64_lossy(fy);
        for &(x0, x1, fx) in &cols {
            let fx = T::from_f64_lossy(fx);
            let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
            out.push(top * (T::one() - fy) + bottom * fy);
        }
    }
}
