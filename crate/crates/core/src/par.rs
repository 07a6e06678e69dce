/// Splits `data` into consecutive mutable chunks where chunk `k` covers
/// `offsets[k]*stride .. offsets[k+1]*stride`.
pub(crate) fn split_ragged<'a, T>(
    mut data: &'a mut [T],
    offsets: &[usize],
    stride: usize,
) -> Vec<&'a mut [T]> {
    debug_assert_eq!(data.len(), offsets.last().copied().unwrap_or(0) * stride);
    let mut out = Vec::with_capacity(offsets.len().saturating_sub(1));
    for w in offsets.windows(2) {
        let (head, tail) = data.split_at_mut((w[1] - w[0]) * stride);
        out.push(head);
        data = tail;
    }
    out
}
