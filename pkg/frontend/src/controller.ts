// Orchestrates the API client and the state machine; main.ts and the
// integration tests drive exactly this object.
import { ApiClient } from "./api.js";
import { ConsoleState } from "./state.js";

export class ConsoleController {
  constructor(
    readonly api: ApiClient,
    readonly state: ConsoleState,
  ) {}

  async loadNext(): Promise<void> {
    this.state.beginLoad();
    try {
      const frame = await this.api.nextFrame(this.state.annotatorId);
      this.state.frameLoaded(frame);
    } catch (err) {
      this.state.loadFailed(String(err));
    }
  }

  /** POST the working labels; on success auto-advance to the next frame.
   * Returns the HTTP status (201/200) or null when the submit failed. */
  async submit(): Promise<number | null> {
    if (!this.state.canSubmit) {
      return null;
    }
    const payload = this.state.toPayload();
    this.state.beginSubmit();
    try {
      const result = await this.api.submit(payload);
      await this.refreshProgress();
      this.state.frameLoaded(await this.api.nextFrame(this.state.annotatorId));
      return result.status;
    } catch (err) {
      this.state.submitFailed(String(err));
      return null;
    }
  }

  async refreshProgress(): Promise<void> {
    this.state.progressLoaded(await this.api.progress());
  }
}
