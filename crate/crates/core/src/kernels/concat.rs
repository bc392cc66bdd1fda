use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::dim(format!(
            "concat_channels: batch/spatial mismatch {sa} vs {sb}"
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor::from_vec(sa.with_channels(sa.c + sb.c), data)
}

/// Splits a gradient of the concatenation back into the two operands' parts.
pub fn concat_channels_backward(upstream: &Tensor, c_first: usize) -> Result<(Tensor, Tensor)> {
    let c = upstream.shape().c;
    if c_first > c {
        return Err(Error::dim(format!("split point {c_first} beyond {c} channels")));
    }
    Ok((upstream.slice_channels(0..c_first)?, upstream.slice_channels(c_first..c)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn shape_law_and_slicing() {
        let mut rng = rand::rng();
        let a = Tensor::random_normal([1, 3, 4, 4], 1.0, &mut rng);
        let b = Tensor::random_normal([1, 5, 4, 4], 1.0, &mut rng);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 8, 4, 4));
        assert_eq!(y.slice_channels(0..3).unwrap(), a);
        assert_eq!(y.slice_channels(3..8).unwrap(), b);
        let (ga, gb) = concat_channels_backward(&y, 3).unwrap();
        assert_eq!((ga, gb), (a, b));
    }

    #[test]
    fn empty_operand() {
        let a = Tensor::filled([2, 3, 2, 2], 1.0);
        let e = Tensor::from_vec([2, 0, 2, 2], vec![]).unwrap();
        assert_eq!(concat_channels(&a, &e).unwrap(), a);
    }

    #[test]
    fn spatial_mismatch() {
        assert!(concat_channels(&Tensor::zeros([1, 1, 2, 2]), &Tensor::zeros([1, 1, 2, 3])).is_err());
    }
}
