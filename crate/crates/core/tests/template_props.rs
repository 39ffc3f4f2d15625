mod common;

use common::{class_of, corrupt, valid_template, CLASSES};
use edgeflow_core::template::{parse_template, render_template};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn render_then_parse_is_identity(t in valid_template()) {
        let text = render_template(&t);
        let back = parse_template(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(render_template(&back), text);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored(t in valid_template()) {
        let text = render_template(&t);
        let noisy: String = text.lines().map(|l| format!("  {l}   # note\n\n")).collect();
        prop_assert_eq!(parse_template(&noisy).unwrap(), t);
    }

    #[test]
    fn each_corruption_yields_its_class(t in valid_template(), which in 0..CLASSES.len()) {
        let class = CLASSES[which];
        let text = corrupt(&render_template(&t), class);
        match parse_template(&text) {
            Ok(_) => prop_assert!(false, "accepted corrupted template ({class}):\n{text}"),
            Err(e) => {
                prop_assert_eq!(class_of(&e), class, "{}\n{}", e, text);
                if let Some(line) = e.line() {
                    prop_assert!(line >= 1 && line <= text.lines().count());
                }
            }
        }
    }
}
