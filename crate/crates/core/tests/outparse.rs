use proptest::prelude::*;
use tabgen::outparse::{extract_probs, parse_prediction, ParseStatus};

#[test]
fn statuses() {
    let ok = parse_prediction("class 0: 0.10; class 1: 0.90.", 2);
    assert_eq!((ok.status, ok.predicted_class), (ParseStatus::Ok, Some(1)));
    assert!(ok.is_correct(1));

    let short = parse_prediction("class 0: 0.70; class 1: 0.2", 3);
    assert_eq!((short.status, short.predicted_class), (ParseStatus::Truncated, Some(0)));
    assert!(!short.is_correct(0));

    let long = parse_prediction(".1 .2 .3", 2);
    assert_eq!((long.status, long.predicted_class), (ParseStatus::Failed, None));
    let none = parse_prediction("I think it is class 1", 2);
    assert_eq!(none.status, ParseStatus::Failed);
    assert!(none.probs.is_empty());
}

#[test]
fn integers_without_fraction_are_ignored() {
    assert_eq!(extract_probs("class 10: 1; class 2: .25 and 3.5"), [0.25, 3.5]);
}

#[test]
fn ties_go_to_the_first_class() {
    assert_eq!(parse_prediction("0.40 0.40 0.20", 3).predicted_class, Some(0));
}

proptest! {
    #[test]
    fn rendered_vectors_parse_exactly(h in prop::collection::vec(0u32..=100, 1..10)) {
        let text = h
            .iter()
            .enumerate()
            .map(|(i, v)| format!("class {i}: {:.2}", *v as f64 / 100.0))
            .collect::<Vec<_>>()
            .join("; ") + ".";
        let p = parse_prediction(&text, h.len());
        prop_assert_eq!(p.status, ParseStatus::Ok);
        let want: Vec<f64> = h.iter().map(|v| *v as f64 / 100.0).collect();
        prop_assert_eq!(&p.probs, &want);
        let max = *h.iter().max().unwrap();
        prop_assert_eq!(p.predicted_class, h.iter().position(|v| *v == max));
    }

    #[test]
    fn never_panics(text in ".{0,200}", k in 1usize..10) {
        let p = parse_prediction(&text, k);
        prop_assert_eq!(p.predicted_class.is_some(), p.status != ParseStatus::Failed);
    }
}
