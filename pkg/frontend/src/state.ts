// Console state machine. Pure transitions so the submit/advance workflow is
// testable without a DOM; every displayed number traces back to an API
// response held here.
import type { LabelEntry, NextFrame, Progress } from "./api.js";

export type Status =
  | "idle" // annotator id not confirmed yet
  | "loading"
  | "annotating"
  | "submitting"
  | "done" // queue empty
  | "error";

const EYES_CLOSED_AU = 43;

export class ConsoleState {
  annotatorId = "";
  status: Status = "idle";
  frame: NextFrame | null = null;
  working: Record<number, LabelEntry> = {};
  lastError: string | null = null;
  progress: Progress | null = null;

  setAnnotator(id: string): void {
    this.annotatorId = id.trim();
  }

  get ready(): boolean {
    return this.annotatorId.length > 0;
  }

  /** Submit is possible only with a frame on screen. */
  get canSubmit(): boolean {
    return this.status === "annotating" && this.frame !== null;
  }

  beginLoad(): void {
    if (!this.ready) {
      throw new Error("annotator id required before loading frames");
    }
    this.status = "loading";
    this.lastError = null;
  }

  frameLoaded(frame: NextFrame | null): void {
    this.frame = frame;
    this.working = {}; // working labels never survive a frame change
    this.status = frame === null ? "done" : "annotating";
  }

  loadFailed(message: string): void {
    // keep the current frame and labels; the UI offers a retry
    this.lastError = message;
    this.status = this.frame === null ? "error" : "annotating";
  }

  toggle(auId: number): void {
    if (!this.canSubmit) {
      return;
    }
    const current = this.working[auId];
    if (current?.present) {
      delete this.working[auId];
    } else {
      this.working[auId] = { present: true };
    }
  }

  setIntensity(auId: number, intensity: number | null): void {
    const entry = this.working[auId];
    if (!entry?.present) {
      return; // intensity only accompanies presence
    }
    if (intensity === null) {
      delete entry.intensity;
      return;
    }
    const hi = auId === EYES_CLOSED_AU ? 1 : 5;
    entry.intensity = Math.max(0, Math.min(hi, Math.round(intensity)));
  }

  beginSubmit(): void {
    if (!this.canSubmit) {
      throw new Error("nothing to submit");
    }
    this.status = "submitting";
    this.lastError = null;
  }

  submitFailed(message: string): void {
    this.lastError = message;
    this.status = "annotating";
  }

  toPayload(): { frame_id: string; annotator_id: string; labels: Record<string, LabelEntry> } {
    if (this.frame === null) {
      throw new Error("no frame loaded");
    }
    const labels: Record<string, LabelEntry> = {};
    for (const [au, entry] of Object.entries(this.working)) {
      labels[au] = entry.intensity === undefined
        ? { present: entry.present }
        : { present: entry.present, intensity: entry.intensity };
    }
    return { frame_id: this.frame.frame_id, annotator_id: this.annotatorId, labels };
  }

  progressLoaded(progress: Progress): void {
    this.progress = progress;
  }
}
