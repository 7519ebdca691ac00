use super::resize::{lerp, tap};
use super::{Dims, Element, Tensor};
use crate::error::{Error, Result};

/// Absolute `(x, y)` sample coordinates, in source pixels, for every output
/// pixel: channel 0 holds x, channel 1 holds y.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid<T: Element = f32>(Tensor<T>);

impl<T: Element> SampleGrid<T> {
    pub fn new(coords: Tensor<T>) -> Result<Self> {
        if coords.dims().c != 2 {
            return Err(Error::dim("sample_grid", "channels", 2, coords.dims().c));
        }
        Ok(SampleGrid(coords))
    }

    /// `grid(o) = o`.
    pub fn identity(n: usize, h: usize, w: usize) -> Self {
        SampleGrid(Tensor::from_fn(Dims::new(n, 2, h, w), |[_, c, y, x]| {
            T::from_usize(if c == 0 { x } else { y }).unwrap()
        }))
    }

    pub fn coords(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_inner(self) -> Tensor<T> {
        self.0
    }
}

struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    x_inside: bool,
    y_inside: bool,
}

#[inline]
fn locate<T: Element>(x: T, y: T, w: usize, h: usize) -> Tap<T> {
    let (xf, yf) = (x.as_f64(), y.as_f64());
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    let (x0, x1, fx) = tap::<T>(xf.clamp(0.0, wmax), w);
    let (y0, y1, fy) = tap::<T>(yf.clamp(0.0, hmax), h);
    Tap {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        x_inside: (0.0..=wmax).contains(&xf),
        y_inside: (0.0..=hmax).contains(&yf),
    }
}

fn check<T: Element>(input: &Tensor<T>, grid: &SampleGrid<T>) -> Result<()> {
    if grid.0.dims().n != input.dims().n {
        return Err(Error::dim("grid_sample", "batch", input.dims().n, grid.0.dims().n));
    }
    Ok(())
}

/// Bilinear sampling with border clamping.
pub fn grid_sample<T: Element>(input: &Tensor<T>, grid: &SampleGrid<T>) -> Result<Tensor<T>> {
    check(input, grid)?;
    let d = input.dims();
    let gd = grid.0.dims();
    let od = Dims::new(d.n, d.c, gd.h, gd.w);
    let mut out = vec![T::zero(); od.len()];
    let gp = gd.plane();
    for n in 0..d.n {
        let gx = grid.0.plane(n, 0);
        let gy = grid.0.plane(n, 1);
        for o in 0..gp {
            let t = locate(gx[o], gy[o], d.w, d.h);
            for c in 0..d.c {
                let src = input.plane(n, c);
                let top = lerp(src[t.y0 * d.w + t.x0], src[t.y0 * d.w + t.x1], t.fx);
                let bot = lerp(src[t.y1 * d.w + t.x0], src[t.y1 * d.w + t.x1], t.fx);
                out[(n * d.c + c) * gp + o] = lerp(top, bot, t.fy);
            }
        }
    }
    Tensor::from_vec(od, out)
}

/// Returns `(d input, d grid)`.
pub fn grid_sample_backward<T: Element>(
    input: &Tensor<T>,
    grid: &SampleGrid<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check(input, grid)?;
    let d = input.dims();
    let gd = grid.0.dims();
    grad_out.expect_dims("grid_sample_backward", Dims::new(d.n, d.c, gd.h, gd.w))?;
    let mut gin = Tensor::zeros(d);
    let mut ggrid = Tensor::zeros(gd);
    let gp = gd.plane();
    let ip = d.plane();
    let one = T::one();
    for n in 0..d.n {
        let gx = grid.0.plane(n, 0);
        let gy = grid.0.plane(n, 1);
        for o in 0..gp {
            let t = locate(gx[o], gy[o], d.w, d.h);
            let (w00, w01) = ((one - t.fx) * (one - t.fy), t.fx * (one - t.fy));
            let (w10, w11) = ((one - t.fx) * t.fy, t.fx * t.fy);
            let (i00, i01) = (t.y0 * d.w + t.x0, t.y0 * d.w + t.x1);
            let (i10, i11) = (t.y1 * d.w + t.x0, t.y1 * d.w + t.x1);
            let mut dx = T::zero();
            let mut dy = T::zero();
            for c in 0..d.c {
                let g = grad_out.data()[(n * d.c + c) * gp + o];
                let base = (n * d.c + c) * ip;
                let src = &input.data()[base..base + ip];
                let (v00, v01, v10, v11) = (src[i00], src[i01], src[i10], src[i11]);
                let gi = &mut gin.data_mut()[base..base + ip];
                gi[i00] = gi[i00] + g * w00;
                gi[i01] = gi[i01] + g * w01;
                gi[i10] = gi[i10] + g * w10;
                gi[i11] = gi[i11] + g * w11;
                dx = dx + g * ((one - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                let top = lerp(v00, v01, t.fx);
                let bot = lerp(v10, v11, t.fx);
                dy = dy + g * (bot - top);
            }
            let gg = ggrid.data_mut();
            if t.x_inside {
                gg[(n * 2) * gp + o] = dx;
            }
            if t.y_inside {
                gg[(n * 2 + 1) * gp + o] = dy;
            }
        }
    }
    Ok((gin, ggrid))
}
