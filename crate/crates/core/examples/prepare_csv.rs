//! Round-trip a dataset through the long CSV format and build windows.

use mossl::data::{load_csv, synth_generate, Dataset, DatasetDescriptor, SplitSpec, SynthSpec};

fn main() -> mossl::Result<()> {
    let dir = std::env::temp_dir().join("mossl-prepare-example");
    std::fs::create_dir_all(&dir).map_err(|e| mossl::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join("series.csv");

    let series = synth_generate(&SynthSpec::planted(5, 3, 300, 0.2), 2)?;
    series.write_csv(&path)?;
    let text = std::fs::read_to_string(&path).map_err(|e| mossl::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    println!("{}", text.lines().take(4).collect::<Vec<_>>().join("\n"));

    let loaded = load_csv(&path)?;
    println!(
        "loaded {} steps x {} nodes x {} modalities",
        loaded.steps(),
        loaded.nodes(),
        loaded.modalities()
    );
    println!("identical values: {}", loaded.values() == series.values());

    let descriptor = DatasetDescriptor::describe("example", &loaded, SplitSpec::default());
    println!("{}", serde_json::to_string_pretty(&descriptor)?);

    let ds = Dataset::build(loaded, SplitSpec::default(), 16, 3, 1)?;
    println!(
        "windows: {} train, {} val, {} test",
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    for (m, name) in ds.series.modality_names().iter().enumerate() {
        println!(
            "{name}: mean {:.4}, std {:.4}",
            ds.stats.mean[m], ds.stats.std[m]
        );
    }
    Ok(())
}
