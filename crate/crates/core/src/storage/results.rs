use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::{EpisodeRecord, ProtocolReport, SummaryTable};

use super::write_bytes;

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";

/// One JSON object per line, fields in declaration order.
pub fn episodes_to_jsonl(episodes: &[EpisodeRecord]) -> Result<String> {
    let mut out = String::new();
    for e in episodes {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn episodes_from_jsonl(text: &str) -> Result<Vec<EpisodeRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Writes `episodes.jsonl` and `summary.csv` into `dir`.
pub fn write_results(dir: &Path, report: &ProtocolReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_bytes(&dir.join(EPISODES_FILE), episodes_to_jsonl(&report.episodes)?.as_bytes())?;
    write_bytes(&dir.join(SUMMARY_FILE), report.table.to_csv().as_bytes())
}

pub fn read_episodes(dir: &Path) -> Result<Vec<EpisodeRecord>> {
    let path = dir.join(EPISODES_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    episodes_from_jsonl(&text)
}

/// Rebuilds the summary from the per-episode records alone.
pub fn summary_from_run(dir: &Path) -> Result<SummaryTable> {
    Ok(SummaryTable::from_records(&read_episodes(dir)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadMode;

    fn record(prompt: &str, shots: usize, seed: u64, accuracy: f64) -> EpisodeRecord {
        EpisodeRecord {
            modal: "multi modal".into(),
            text_prompt: prompt.into(),
            method: "cls+visual_so".into(),
            head_mode: HeadMode::ClsPlusSo,
            shots,
            seed,
            lr: 0.001,
            weight_decay: 0.0,
            accuracy,
            evaluated_on: "val".into(),
            selection_accuracy: accuracy,
            train_accuracy: 1.0,
            grid: Vec::new(),
            loss_history: vec![(0, 1.25)],
            support: vec![vec![0]],
            wallclock_secs: 0.0,
        }
    }

    fn report() -> ProtocolReport {
        let mut episodes = Vec::new();
        for p in ["vanilla", "coop4"] {
            for shots in [1, 2, 4, 8, 16] {
                for seed in 0..3 {
                    episodes.push(record(p, shots, seed, (shots as f64 + seed as f64 * 0.1) / 17.0));
                }
            }
        }
        let table = SummaryTable::from_records(&episodes);
        ProtocolReport { episodes, table }
    }

    #[test]
    fn csv_has_a_column_per_shot() {
        let csv = report().table.to_csv();
        let header = csv.lines().next().unwrap();
        assert_eq!(header, "modal,text_prompt,method,1-shot,2-shot,4-shot,8-shot,16-shot");
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn rewrite_is_byte_identical_and_means_recompute() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        write_results(dir.path(), &r).unwrap();
        let first = std::fs::read(dir.path().join(SUMMARY_FILE)).unwrap();
        let first_jsonl = std::fs::read(dir.path().join(EPISODES_FILE)).unwrap();
        write_results(dir.path(), &r).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join(SUMMARY_FILE)).unwrap());
        assert_eq!(first_jsonl, std::fs::read(dir.path().join(EPISODES_FILE)).unwrap());

        let back = read_episodes(dir.path()).unwrap();
        assert_eq!(back.len(), 30);
        let csv = String::from_utf8(first).unwrap();
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            for (k, shots) in [1, 2, 4, 8, 16].into_iter().enumerate() {
                let accs: Vec<f64> = back
                    .iter()
                    .filter(|e| e.text_prompt == cols[1] && e.shots == shots)
                    .map(|e| e.accuracy)
                    .collect();
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                let cell: f64 = cols[3 + k].parse().unwrap();
                assert!((mean - cell).abs() < 1e-9);
            }
        }
        assert_eq!(summary_from_run(dir.path()).unwrap(), r.table);
    }
}
