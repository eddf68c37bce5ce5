use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepsearch_core::grammar::{parse_step, parse_trajectory, ActionStep, GrammarError, Step, Trajectory};

const EEZ_TRAJECTORY: &str = include_str!("fixtures/eez_trajectory.txt");

fn content() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9<>&;/\"'.,:()\u{4e00}-\u{4e10} ]{0,40}"
        .prop_map(|s| s.trim().to_string())
        .prop_filter("non-empty", |s| !s.is_empty())
}

fn step(n: usize) -> impl Strategy<Value = Step> {
    prop_oneof![
        (0..n).prop_map(Step::Proposal),
        content().prop_map(Step::Thought),
        (proptest::option::of(content()), content(), content(), proptest::option::of(content())).prop_map(
            |(thought, tool, input, observation)| Step::Action(ActionStep { thought, tool, input, observation })
        ),
        (0..n).prop_map(Step::FinalAnswer),
    ]
}

proptest! {
    #[test]
    fn step_round_trip(s in step(4)) {
        let text = s.raw_text();
        prop_assert_eq!(parse_step(&text, 4).unwrap(), s);
    }

    #[test]
    fn trajectory_round_trip(mut steps in proptest::collection::vec(step(6), 0..8)) {
        steps.retain(|s| !s.is_final());
        steps.push(Step::FinalAnswer(2));
        let t = Trajectory::new(steps);
        let text = t.raw_text();
        prop_assert_eq!(parse_trajectory(&text, 6).unwrap(), t.clone());
        let (_, spans) = t.serialize_with_spans();
        let chars: Vec<char> = text.chars().collect();
        for sp in spans {
            prop_assert!(sp.end <= chars.len());
        }
    }

    #[test]
    fn upper_case_tags_accepted(s in step(4)) {
        let text = s.raw_text();
        let shouted = text
            .replace("<step>", "<STEP>")
            .replace("</step>", "</STEP>")
            .replace("<thought>", "<Thought>")
            .replace("</thought>", "</THOUGHT>");
        prop_assert_eq!(parse_step(&shouted, 4).unwrap(), s);
    }

    #[test]
    fn arbitrary_text_never_panics(text in "\\PC{0,200}") {
        let r = parse_step(&text, 4);
        prop_assert!(r.is_ok() || matches!(r, Err(GrammarError::Unparsable(_))));
    }
}

const FRAGMENTS: &[&str] = &[
    "<step>",
    "</step>",
    "<thought>",
    "</thought>",
    "<action>",
    "</action>",
    "<action_input>",
    "</action_input>",
    "<observation>",
    "</observation>",
    "<proposal>",
    "</proposal>",
    "<final_answer>",
    "</final_answer>",
    "<",
    ">",
    "&",
    "&amp;",
    "&lt;",
    "A",
    "Z",
    " ",
    "\n",
    "/",
    "法",
];

fn mutate(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    for _ in 0..rng.gen_range(1..4) {
        let pos = rng.gen_range(0..=chars.len());
        match rng.gen_range(0..5) {
            0 if !chars.is_empty() => {
                let end = (pos + rng.gen_range(1..8)).min(chars.len());
                let start = pos.min(end);
                chars.drain(start..end);
            }
            1 => {
                let frag = FRAGMENTS[rng.gen_range(0..FRAGMENTS.len())];
                chars.splice(pos..pos, frag.chars());
            }
            2 if !chars.is_empty() => {
                let i = rng.gen_range(0..chars.len());
                chars[i] = char::from_u32(rng.gen_range(0x20..0x3000)).unwrap_or('?');
            }
            3 => {
                let end = (pos + rng.gen_range(1..10)).min(chars.len());
                let dup: Vec<char> = chars[pos.min(end)..end].to_vec();
                chars.splice(pos..pos, dup);
            }
            _ if !chars.is_empty() => {
                let i = rng.gen_range(0..chars.len());
                chars[i] = if chars[i].is_ascii_lowercase() {
                    chars[i].to_ascii_uppercase()
                } else {
                    chars[i].to_ascii_lowercase()
                };
            }
            _ => {}
        }
    }
    chars.into_iter().collect()
}

#[test]
fn mutation_fuzz_yields_valid_or_unparsable() {
    let table = parse_trajectory(EEZ_TRAJECTORY, 4).unwrap();
    let seeds: Vec<String> = table.steps.iter().map(Step::raw_text).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut valid, mut bad) = (0, 0);
    for _ in 0..2000 {
        let base = &seeds[rng.gen_range(0..seeds.len())];
        let text = mutate(base, &mut rng);
        match parse_step(&text, 4) {
            Ok(step) => {
                valid += 1;
                assert_eq!(parse_step(&step.raw_text(), 4).unwrap(), step, "{text}");
            }
            Err(GrammarError::Unparsable(_)) => bad += 1,
            Err(other) => panic!("unexpected error {other:?} for {text:?}"),
        }
    }
    assert!(valid > 0 && bad > 0);
}
