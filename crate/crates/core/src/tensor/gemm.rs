/// Panics if an `rows × cols` strided view does not fit in `len` elements.
pub(super) fn check_extent(rows: usize, cols: usize, len: usize, rs: isize, cs: isize) {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm view {rows}x{cols} (strides {rs},{cs}) exceeds buffer of {len}");
}

#[cfg(test)]
mod tests {
    use crate::tensor::Scalar;

    #[test]
    fn transposed_view_product() {
        // a = [[1,2],[3,4]], a^T · a = [[10,14],[14,20]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, 1, 2, &a, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    #[should_panic]
    fn oversize_view_panics() {
        let a = [1.0f32; 3];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, &a, 2, 1, &a, 2, 1, 0.0, &mut c, 2, 1);
    }
}
