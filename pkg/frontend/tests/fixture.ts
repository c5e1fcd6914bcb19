import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import type { ProgressEvent, ReportJson } from "../src/types.js";

const here = dirname(fileURLToPath(import.meta.url));

export function fixtureEvents(): ProgressEvent[] {
  const raw = readFileSync(join(here, "fixtures", "events.ndjson"), "utf-8");
  return raw
    .split("\n")
    .filter((line) => line.trim())
    .map((line) => JSON.parse(line) as ProgressEvent);
}

export function fixtureReport(): ReportJson {
  return JSON.parse(readFileSync(join(here, "fixtures", "report.json"), "utf-8")) as ReportJson;
}
