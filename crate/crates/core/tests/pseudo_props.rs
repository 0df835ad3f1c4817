mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statechange::pseudo::{build_cross_task_negatives, build_labels_for, BatchVideo, LabelRuleConfig, RuleSet};
use statechange::types::{Architecture, HeadLayout, LabelKind};

use common::{check_label_invariants, label_case, reference_labels};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn builder_matches_reference(seed in any::<u64>()) {
        let case = label_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let labels = build_labels_for("v", case.num_frames, case.fps, &case.loc, &case.config(), &case.layout).unwrap();
        let got: BTreeSet<(usize, LabelKind)> = labels.iter().map(|l| (l.frame, l.kind)).collect();
        prop_assert_eq!(got.len(), labels.len());
        prop_assert_eq!(&got, &reference_labels(&case));
        if let Err(why) = check_label_invariants(&case, &labels) {
            prop_assert!(false, "{}", why);
        }
    }

    #[test]
    fn rules_ab_equal_single_task_scheme(seed in any::<u64>()) {
        let mut case = label_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut full = case.config();
        full.rules = RuleSet::SINGLE_TASK;
        let a = build_labels_for("v", case.num_frames, case.fps, &case.loc, &full, &case.layout).unwrap();
        case.rules = RuleSet { c: false, d: false, e: false, ..RuleSet::ALL };
        let b = build_labels_for("v", case.num_frames, case.fps, &case.loc, &case.config(), &case.layout).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|l| l.kind != LabelKind::BgS));
    }

    #[test]
    fn cross_negatives_come_from_foreign_videos(
        labels in prop::collection::vec(0usize..4, 1..8),
        lens in prop::collection::vec(3usize..40, 8),
        per_video in prop::option::of(0usize..12),
        seed in any::<u64>(),
        state_background in any::<bool>(),
    ) {
        let ids: Vec<String> = (0..labels.len()).map(|i| format!("v{i}")).collect();
        let batch: Vec<BatchVideo<'_>> = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| BatchVideo { id: &ids[i], num_frames: lens[i], label, positives: 5 })
            .collect();
        let cfg = LabelRuleConfig { explicit_negatives_per_video: per_video, seed, ..Default::default() };
        let layout = HeadLayout::new(Architecture::MultiClassifier, 4, state_background);
        let negs = build_cross_task_negatives(&batch, &cfg, &layout);
        let mut expected = 0;
        for v in &batch {
            let pool: usize = batch.iter().filter(|o| o.label != v.label).map(|o| o.num_frames).sum();
            expected += per_video.unwrap_or(v.positives).min(pool);
        }
        prop_assert_eq!(negs.len(), expected);
        for n in &negs {
            let host = batch.iter().find(|b| b.id == n.video_id).unwrap();
            prop_assert_ne!(host.label, n.category);
            prop_assert!(n.frame < host.num_frames);
            prop_assert!(!n.kind.is_positive());
            prop_assert!(state_background || n.kind == LabelKind::BgA);
        }
        prop_assert_eq!(&negs, &build_cross_task_negatives(&batch, &cfg, &layout));
        for arch in [Architecture::Independent, Architecture::Joint1, Architecture::Joint2] {
            prop_assert!(build_cross_task_negatives(&batch, &cfg, &HeadLayout::new(arch, 4, true)).is_empty());
        }
    }
}
