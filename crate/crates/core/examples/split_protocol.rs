//! Reference-grouped FR splits (6:2:2) and random NR splits (8:2) over ten
//! seeded repeats.
//!
//! ```text
//! cargo run --example split_protocol
//! ```

use bpclip::data::{split_dataset, Entry, Polarity, SampleManifest, SplitSpec};
use bpclip::Mode;

fn main() -> bpclip::Result<()> {
    let entries = (0..20)
        .flat_map(|r| {
            (0..5).map(move |k| Entry {
                id: format!("r{r}_d{k}"),
                image_path: format!("dist/r{r}_d{k}.png").into(),
                reference_path: Some(format!("ref/r{r}.png").into()),
                mos: (k + 1) as f64,
                group_key: format!("r{r}"),
            })
        })
        .collect();
    let fr = SampleManifest::new(entries, Mode::Fr, Polarity::HigherBetter, Some((1.0, 5.0)), ".".into(), false)?;
    for repeat in 0..10 {
        let s = split_dataset(&fr, &SplitSpec::for_mode(Mode::Fr, 0, repeat))?;
        let mut test: Vec<&str> = s.test.iter().map(|&i| fr.entries[i].group_key.as_str()).collect();
        test.dedup();
        println!("FR repeat {repeat}: {}/{}/{} samples, test references {test:?}", s.train.len(), s.val.len(), s.test.len());
    }

    let nr_entries = (0..25)
        .map(|i| Entry {
            id: format!("i{i}"),
            image_path: format!("img/{i}.png").into(),
            reference_path: None,
            mos: i as f64,
            group_key: String::new(),
        })
        .collect();
    let nr = SampleManifest::new(nr_entries, Mode::Nr, Polarity::HigherBetter, None, ".".into(), false)?;
    let s = split_dataset(&nr, &SplitSpec::for_mode(Mode::Nr, 0, 0))?;
    println!("NR: {} train, {} test", s.train.len(), s.test.len());
    Ok(())
}
