/// Added to the group standard deviation before dividing.
pub const ADVANTAGE_EPS: f64 = 1e-8;

/// Group-relative advantages: `(R_i - mean) / (std + eps)` with the
/// population standard deviation. A group of one, or a group whose rewards
/// are all equal, carries no signal and gets all zeros.
pub fn group_advantage(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len();
    if n <= 1 {
        return vec![0.0; n];
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; n];
    }
    rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn constant_group_has_no_advantage() {
        assert_eq!(group_advantage(&[1.0, 1.0, 1.0, 1.0]), vec![0.0; 4]);
    }

    #[test]
    fn two_outcomes() {
        let a = group_advantage(&[1.0, 0.0]);
        let want = 0.5 / (0.5 + ADVANTAGE_EPS);
        assert_eq!(a, vec![want, -want]);
    }

    #[test]
    fn singleton_group() {
        assert_eq!(group_advantage(&[1.0]), vec![0.0]);
        assert!(group_advantage(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn advantages_are_centered(r in prop::collection::vec(0.0f64..1.0, 2..16)) {
            let a = group_advantage(&r);
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        }
    }
}
