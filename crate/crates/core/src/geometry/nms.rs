use super::{rotated_iou_bev, Proposal, ProposalSet};

/// Greedy rotated-IoU non-maximum suppression.
///
/// Candidates are visited by descending confidence; on equal confidence the
/// lower input index goes first. A candidate survives when its IoU with every
/// earlier survivor stays below `eta`. The output is sorted like the visit order.
pub fn nms(set: &ProposalSet, eta: f64) -> ProposalSet {
    ProposalSet {
        frame_id: set.frame_id,
        view: set.view,
        items: nms_indices(&set.items, eta)
            .into_iter()
            .map(|i| set.items[i])
            .collect(),
    }
}

/// Input indices of the [`nms`] survivors, in output order.
pub fn nms_indices(items: &[Proposal], eta: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    // Stable sort keeps insertion order among ties.
    order.sort_by(|&i, &j| items[j].confidence.total_cmp(&items[i].confidence));

    let mut kept: Vec<usize> = Vec::with_capacity(order.len());
    for &i in &order {
        let candidate = &items[i].bbox;
        if kept
            .iter()
            .all(|&k| rotated_iou_bev(&items[k].bbox, candidate) < eta)
        {
            kept.push(i);
        }
    }
    kept
}
