use forge_core::curate::{curate, merge_to_detection, CurateOptions, Lexicon, DEFAULT_DEDUP_IOU};
use forge_core::model::{namespaced, AnnotatedImage, BBox, DetailLevel, Payload, RegionAnnotation, SourceName};
use proptest::prelude::*;

fn image(regions: &[(u8, [u16; 4])]) -> AnnotatedImage {
    let names = ["cup", "dog", "man"];
    AnnotatedImage {
        image_id: namespaced(SourceName::MsCoco, "1"),
        width: 400,
        height: 400,
        uri: String::new(),
        source: SourceName::MsCoco,
        regions: regions
            .iter()
            .map(|(l, b)| {
                let (x, y) = (b[0] as f64, b[1] as f64);
                RegionAnnotation {
                    bbox: BBox::pixels(x, y, x + b[2] as f64, y + b[3] as f64),
                    expression: names[*l as usize].into(),
                    category: Some(names[*l as usize].into()),
                    detail_level: DetailLevel::Unclassified,
                    source: SourceName::MsCoco,
                }
            })
            .collect(),
        negatives: Vec::new(),
    }
}

fn regions() -> impl Strategy<Value = Vec<(u8, [u16; 4])>> {
    prop::collection::vec((0u8..3, [0u16..200, 0u16..200, 1u16..100, 1u16..100]), 1..20)
}

proptest! {
    #[test]
    fn boxes_are_conserved(r in regions()) {
        let out = merge_to_detection(&image(&r), &Lexicon::default(), DEFAULT_DEDUP_IOU).unwrap();
        prop_assert_eq!(out.input_boxes, r.len() as u64);
        prop_assert_eq!(out.input_boxes, out.emitted_boxes + out.deduped_boxes);
        prop_assert_eq!(out.sample.box_count() as u64, out.emitted_boxes);
    }

    #[test]
    fn merging_twice_changes_nothing(r in regions()) {
        let lex = Lexicon::default();
        let once = merge_to_detection(&image(&r), &lex, DEFAULT_DEDUP_IOU).unwrap();
        let Payload::Detection { objects, .. } = &once.sample.payload else { panic!("not a detection sample") };
        let flat: Vec<_> = objects
            .iter()
            .flat_map(|o| {
                let l = ["cup", "dog", "man"].iter().position(|n| *n == o.label).unwrap() as u8;
                o.boxes.iter().map(move |b| (l, [b.x1 as u16, b.y1 as u16, (b.x2 - b.x1) as u16, (b.y2 - b.y1) as u16]))
            })
            .collect();
        let twice = merge_to_detection(&image(&flat), &lex, DEFAULT_DEDUP_IOU).unwrap();
        prop_assert_eq!(twice.deduped_boxes, 0);
        prop_assert_eq!(&twice.sample.payload, &once.sample.payload);
    }
}

#[test]
fn ledger_balances_over_a_corpus() {
    let images: Vec<_> = (0..20u16)
        .map(|i| {
            let mut img = image(&[(0, [i, i, 50, 50]), (0, [i, i, 50, 50]), (1, [100, 100, 30 + i, 30])]);
            img.image_id = namespaced(SourceName::MsCoco, &i.to_string());
            img
        })
        .collect();
    let out = curate(images, Vec::new(), &CurateOptions::default());
    let t = out.ledger.total().task_level;
    assert!(out.ledger.conserved());
    assert_eq!((t.input_regions, t.deduped_boxes, t.merged_boxes), (60, 20, 40));
}
