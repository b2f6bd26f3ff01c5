use crate::model::Conv2d;
use crate::par::Exec;
use crate::tensor::{Shape, SparseMatrix};

/// A convolution as an explicit affine map `y = W·x + b` on flattened maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvJacobian {
    /// `q × p`: rows are output neurons, columns input neurons.
    pub matrix: SparseMatrix,
    /// Bias of each output neuron's channel.
    pub bias_vector: Vec<f64>,
}

impl ConvJacobian {
    pub fn apply(&self, x: &[f64], exec: Exec) -> Vec<f64> {
        let mut y = self.matrix.matvec(x, exec);
        y.iter_mut().zip(&self.bias_vector).for_each(|(v, b)| *v += b);
        y
    }
}

/// Entry `(i, j)` is the kernel weight linking input neuron `j` to output
/// neuron `i`; unconnected pairs (and zero weights) are left implicit.
pub fn assemble_conv_jacobian(conv: &Conv2d, in_shape: &Shape, out_shape: &Shape, exec: Exec) -> ConvJacobian {
    let (cin, h, w) = in_shape.as_chw().expect("feature-map shape");
    let (cout, oh, ow) = out_shape.as_chw().expect("feature-map shape");
    let (kh, kw) = conv.kernel;
    let weights = conv.weight.data();
    let q = cout * oh * ow;
    let rows = exec.map(q, |i| {
        let co = i / (oh * ow);
        let oy = (i / ow) % oh;
        let ox = i % ow;
        let mut row = Vec::with_capacity(cin * kh * kw);
        for ci in 0..cin {
            for ky in 0..kh {
                let iy = (oy * conv.stride.0 + ky) as isize - conv.padding.0 as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * conv.stride.1 + kx) as isize - conv.padding.1 as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let v = weights[((co * cin + ci) * kh + ky) * kw + kx];
                    if v != 0.0 {
                        row.push(((ci * h + iy as usize) * w + ix as usize, v));
                    }
                }
            }
        }
        row
    });
    let bias_vector = (0..q).map(|i| conv.bias[i / (oh * ow)]).collect();
    ConvJacobian {
        matrix: SparseMatrix::from_sorted_rows(cin * h * w, rows).expect("row-major assembly"),
        bias_vector,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{conv2d_forward, LayerSpec};
    use crate::tensor::{fd_jacobian, Tensor};

    #[allow(clippy::too_many_arguments)]
    fn conv(
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        w: Vec<f64>,
        b: Vec<f64>,
    ) -> Conv2d {
        Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: (kh, kw),
            stride: (stride, stride),
            padding: (pad, pad),
            weight: Tensor::new(Shape::new(vec![cout, cin, kh, kw]).unwrap(), w).unwrap(),
            bias: b,
        }
    }

    #[test]
    fn one_by_one_conv_is_scaled_identity() {
        let c = conv(1, 1, 1, 1, 1, 0, vec![2.0], vec![0.0]);
        let s = Shape::chw(1, 2, 2).unwrap();
        let j = assemble_conv_jacobian(&c, &s, &s, Exec::Sequential);
        let d = j.matrix.to_dense();
        for r in 0..4 {
            for k in 0..4 {
                assert_eq!(d[(r, k)], if r == k { 2.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn one_dimensional_kernel_rows() {
        // A 1×2 kernel over a 1×3 row: [[1,2,0],[0,1,2]].
        let c = conv(1, 1, 1, 2, 1, 0, vec![1.0, 2.0], vec![0.5]);
        let inp = Shape::chw(1, 1, 3).unwrap();
        let out = LayerSpec::Conv2d(c.clone()).output_shape(&inp).unwrap();
        let j = assemble_conv_jacobian(&c, &inp, &out, Exec::Sequential);
        let rows: Vec<Vec<f64>> = (0..2).map(|r| j.matrix.to_dense().row(r).to_vec()).collect();
        assert_eq!(rows, vec![vec![1.0, 2.0, 0.0], vec![0.0, 1.0, 2.0]]);
        assert_eq!(j.bias_vector, vec![0.5, 0.5]);

        let x = Tensor::new(inp.clone(), vec![0.3, -1.0, 2.0]).unwrap();
        let fd = fd_jacobian(
            |v| {
                conv2d_forward(
                    &c,
                    &Tensor::new(inp.clone(), v.to_vec()).unwrap(),
                    true,
                    Exec::Sequential,
                )
                .unwrap()
                .into_data()
            },
            x.data(),
            1e-3,
            Exec::Sequential,
        )
        .unwrap();
        for r in 0..2 {
            for k in 0..3 {
                assert!((fd[(r, k)] - rows[r][k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn affine_map_reproduces_forward() {
        let w: Vec<f64> = (0..2 * 3 * 9).map(|k| ((k * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let c = conv(3, 2, 3, 3, 2, 1, w, vec![0.25, -0.5]);
        let inp = Shape::chw(3, 5, 4).unwrap();
        let out = LayerSpec::Conv2d(c.clone()).output_shape(&inp).unwrap();
        let x: Vec<f64> = (0..inp.numel()).map(|k| (k as f64 * 0.37).sin()).collect();
        let j = assemble_conv_jacobian(&c, &inp, &out, Exec::Parallel);
        let y = conv2d_forward(&c, &Tensor::new(inp, x.clone()).unwrap(), true, Exec::Sequential).unwrap();
        for (a, b) in j.apply(&x, Exec::Sequential).iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
