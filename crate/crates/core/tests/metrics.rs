use proptest::prelude::*;

use gfss_lidar::evaluation::{report, AbsentPolicy, ConfusionMatrix, EvalOptions};
use gfss_lidar::gradcheck::Layout;
use gfss_lidar::taxonomy::{ClassId, Label};

fn labels(k: u32) -> impl Strategy<Value = Vec<(Label, ClassId)>> {
    prop::collection::vec(
        (prop::option::weighted(0.85, 0..k), 0..k).prop_map(|(t, p)| (t.map(ClassId), ClassId(p))),
        0..64,
    )
}

fn confusion(classes: &[ClassId], pairs: &[(Label, ClassId)]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::new(classes.to_vec());
    let (truth, pred): (Vec<Label>, Vec<Label>) = pairs.iter().map(|&(t, p)| (t, Some(p))).unzip();
    m.accumulate(&pred, &truth).unwrap();
    m
}

proptest! {
    #[test]
    fn report_ignores_point_order(pairs in labels(5), rot in 0usize..64) {
        let tax = Layout::new(2, 2).tax;
        let classes = tax.all_classes();
        let mut shuffled = pairs.clone();
        if !shuffled.is_empty() {
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
        }
        let opts = EvalOptions::default();
        let a = report(&confusion(&classes, &pairs), &tax, &opts).unwrap();
        let b = report(&confusion(&classes, &shuffled), &tax, &opts).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn merge_is_associative(a in labels(5), b in labels(5), c in labels(5)) {
        let classes = Layout::new(2, 2).tax.all_classes();
        let (ma, mb, mc) = (confusion(&classes, &a), confusion(&classes, &b), confusion(&classes, &c));
        let mut left = ma.clone();
        left.merge(&mb).unwrap();
        left.merge(&mc).unwrap();
        let mut right = mb.clone();
        right.merge(&mc).unwrap();
        right.merge(&ma).unwrap();
        prop_assert_eq!(&left, &right);
        let all: Vec<_> = a.iter().chain(&b).chain(&c).copied().collect();
        prop_assert_eq!(left, confusion(&classes, &all));
    }

    #[test]
    fn overall_mean_with_background_is_mean_of_present(pairs in labels(5)) {
        let tax = Layout::new(2, 2).tax;
        let classes = tax.all_classes();
        let opts = EvalOptions { include_background: true, absent: AbsentPolicy::Exclude };
        let r = report(&confusion(&classes, &pairs), &tax, &opts).unwrap();
        let present: Vec<f64> = r.classes.iter().filter_map(|c| c.iou).collect();
        match r.miou {
            None => prop_assert!(present.is_empty()),
            Some(m) => {
                let mean = present.iter().sum::<f64>() / present.len() as f64;
                prop_assert!((m - mean).abs() < 1e-9);
                if present.len() == classes.len() {
                    prop_assert!((classes.len() as f64 * m - present.iter().sum::<f64>()).abs() < 1e-9);
                }
            }
        }
    }
}
