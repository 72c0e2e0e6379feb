use serde::Serialize;

use crate::error::CliResult;
use crate::{Context, RunInfo};

#[derive(Serialize)]
struct Row {
    name: &'static str,
    description: &'static str,
}

pub fn run(ctx: &mut Context) -> CliResult<RunInfo> {
    let rows: Vec<Row> = lockin::problems::list()
        .into_iter()
        .map(|(name, description)| Row { name, description })
        .collect();
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    println!("{:width$}  description", "name");
    for r in &rows {
        println!("{:width$}  {}", r.name, r.description);
    }
    ctx.out.write_table("problems", &rows, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        for r in &rows {
            w.serialize(r).map_err(lockin::Error::from)?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(RunInfo::default())
}
