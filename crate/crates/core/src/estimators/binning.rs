/// Assigns each value to one of `n_bins` equal-frequency bins.
///
/// Values are ranked (ties share the rank of their first occurrence) and the
/// value with rank `r` out of `N` goes to bin `floor(r * n_bins / N)`. Tied
/// values always share a bin, and with distinct values and `n_bins == N`
/// every bin holds exactly one value.
pub fn quantile_bins(values: &[f64], n_bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut bins = vec![0; n];
    let mut group_rank = 0;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 && values[order[rank - 1]].total_cmp(&values[i]).is_ne() {
            group_rank = rank;
        }
        bins[i] = ((group_rank as u128 * n_bins as u128) / n as u128) as usize;
    }
    bins
}
