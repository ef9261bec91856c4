use crate::error::{Error, Result};

/// Minimum-cost perfect matching on a square cost matrix. Returns the
/// column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // potentials-based O(n³) formulation, 1-indexed with a virtual column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[owner[j] - 1] = j - 1;
    }
    out
}

/// `counts[cluster][label]`, square of side `max(k, classes)`.
pub fn contingency(assignments: &[usize], labels: &[usize], k: usize, classes: usize) -> Vec<Vec<usize>> {
    let n = k.max(classes);
    let mut m = vec![vec![0usize; n]; n];
    for (&a, &l) in assignments.iter().zip(labels) {
        m[a][l] += 1;
    }
    m
}

/// Cluster-to-label mapping that maximizes agreement. Clusters that end up
/// matched to a padding label map to `None`.
pub fn cluster_mapping(assignments: &[usize], labels: &[usize], k: usize, classes: usize) -> Vec<Option<usize>> {
    let m = contingency(assignments, labels, k, classes);
    let cost: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|&c| -(c as f64)).collect()).collect();
    hungarian(&cost)
        .into_iter()
        .take(k)
        .map(|l| (l < classes).then_some(l))
        .collect()
}

/// Accuracy under the best one-to-one cluster-label mapping.
pub fn cluster_accuracy(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} assignments for {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("cluster accuracy of an empty set".into()));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let map = cluster_mapping(assignments, labels, k, classes);
    let correct = assignments
        .iter()
        .zip(labels)
        .filter(|(&a, &l)| map[a] == Some(l))
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permuted_labels_score_one() {
        let labels = [0, 0, 1, 1, 2, 2, 2];
        let assign = [2, 2, 0, 0, 1, 1, 1];
        assert_eq!(cluster_accuracy(&assign, &labels).unwrap(), 1.0);
    }

    #[test]
    fn known_three_by_three() {
        // counts[cluster][label]
        let counts = [[5, 1, 0], [2, 0, 4], [0, 6, 1]];
        let (mut a, mut l) = (Vec::new(), Vec::new());
        for (c, row) in counts.iter().enumerate() {
            for (lab, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    a.push(c);
                    l.push(lab);
                }
            }
        }
        // best: 0->0, 1->2, 2->1 = 15 of 19
        assert!((cluster_accuracy(&a, &l).unwrap() - 15.0 / 19.0).abs() < 1e-12);
        assert_eq!(cluster_mapping(&a, &l, 3, 3), vec![Some(0), Some(2), Some(1)]);
    }

    #[test]
    fn length_mismatch_is_fatal() {
        assert!(cluster_accuracy(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn uneven_cluster_and_label_counts() {
        // 3 clusters, 2 labels: one cluster stays unmapped
        let a = [0, 0, 1, 1, 2];
        let l = [1, 1, 0, 0, 0];
        assert_eq!(cluster_accuracy(&a, &l).unwrap(), 0.8);
    }
}
