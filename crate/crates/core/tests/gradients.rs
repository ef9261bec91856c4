mod common;

use proptest::prelude::*;

use common::{CHECKS, TOLERANCE};

fn check(name: &str, seed: u64) -> Result<(), TestCaseError> {
    let (_, f) = CHECKS.iter().find(|(n, _)| *n == name).expect("known check");
    let err = f(seed);
    prop_assert!(err < TOLERANCE, "{name} seed {seed}: rel error {err:e}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul(seed in any::<u64>()) { check("matmul", seed)?; }

    #[test]
    fn linear(seed in any::<u64>()) { check("linear", seed)?; }

    #[test]
    fn softmax(seed in any::<u64>()) { check("softmax", seed)?; }

    #[test]
    fn layer_norm(seed in any::<u64>()) { check("layer_norm", seed)?; }

    #[test]
    fn gelu(seed in any::<u64>()) { check("gelu", seed)?; }

    #[test]
    fn mean_pool(seed in any::<u64>()) { check("mean_pool", seed)?; }

    #[test]
    fn concat_rows(seed in any::<u64>()) { check("concat_rows", seed)?; }

    #[test]
    fn cross_entropy(seed in any::<u64>()) { check("cross_entropy", seed)?; }

    #[test]
    fn l1_loss(seed in any::<u64>()) { check("l1_loss", seed)?; }

    #[test]
    fn attention(seed in any::<u64>()) { check("attention", seed)?; }

    #[test]
    fn mlp(seed in any::<u64>()) { check("mlp", seed)?; }

    #[test]
    fn encoder_block(seed in any::<u64>()) { check("encoder_block", seed)?; }

    #[test]
    fn encoder_block_post_norm(seed in any::<u64>()) { check("encoder_block_post_norm", seed)?; }

    #[test]
    fn sane_loss(seed in any::<u64>()) { check("sane_loss", seed)?; }

    #[test]
    fn cvae_loss(seed in any::<u64>()) { check("cvae_loss", seed)?; }
}
