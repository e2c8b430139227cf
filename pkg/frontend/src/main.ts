// DOM wiring for the annotation console.
import { ApiClient } from "./api.js";
import { chartGroups } from "./chart.js";
import { ConsoleController } from "./controller.js";
import { actionForKey, auForSlot, isTypingTarget } from "./keyboard.js";
import { ConsoleState } from "./state.js";

const api = new ApiClient("");
const state = new ConsoleState();
const controller = new ConsoleController(api, state);

const el = {
  annotator: document.querySelector<HTMLInputElement>("#annotator")!,
  start: document.querySelector<HTMLButtonElement>("#start")!,
  banner: document.querySelector<HTMLDivElement>("#banner")!,
  frameId: document.querySelector<HTMLSpanElement>("#frame-id")!,
  image: document.querySelector<HTMLImageElement>("#frame-image")!,
  grid: document.querySelector<HTMLDivElement>("#au-grid")!,
  submit: document.querySelector<HTMLButtonElement>("#submit")!,
  retry: document.querySelector<HTMLButtonElement>("#retry")!,
  progress: document.querySelector<HTMLDivElement>("#progress")!,
  chart: document.querySelector<HTMLDivElement>("#chart")!,
};

function renderBanner(): void {
  if (state.status === "done") {
    el.banner.textContent = "Queue empty: every frame is annotated. Thank you!";
    el.banner.className = "banner done";
  } else if (state.lastError) {
    el.banner.textContent = state.lastError;
    el.banner.className = "banner error";
  } else {
    el.banner.textContent = "";
    el.banner.className = "banner";
  }
  el.retry.hidden = !state.lastError;
}

function renderFrame(): void {
  const frame = state.frame;
  el.submit.disabled = !state.canSubmit;
  if (!frame) {
    el.frameId.textContent = "";
    el.image.removeAttribute("src");
    el.grid.replaceChildren();
    return;
  }
  el.frameId.textContent = frame.frame_id;
  el.image.src = api.imageUrl(frame.frame_id);
  el.grid.replaceChildren(
    ...frame.au_schema.map((entry, slot) => {
      const cell = document.createElement("div");
      cell.className = "au-cell";
      const active = state.working[entry.au_id]?.present === true;
      if (active) {
        cell.classList.add("active");
      }

      const button = document.createElement("button");
      const hint = slot < 9 ? `${slot + 1}` : slot === 9 ? "0" : slot === 10 ? "q" : "w";
      button.textContent = `AU${entry.au_id} ${entry.description} [${hint}]`;
      button.onclick = () => {
        state.toggle(entry.au_id);
        renderFrame();
      };
      cell.appendChild(button);

      if (active) {
        const stepper = document.createElement("input");
        stepper.type = "number";
        stepper.min = "0";
        stepper.max = entry.au_id === 43 ? "1" : "5";
        stepper.placeholder = "intensity";
        const current = state.working[entry.au_id]?.intensity;
        stepper.value = current === undefined ? "" : String(current);
        stepper.onchange = () => {
          state.setIntensity(entry.au_id, stepper.value === "" ? null : Number(stepper.value));
        };
        cell.appendChild(stepper);
      }
      return cell;
    }),
  );
}

function renderProgress(): void {
  const progress = state.progress;
  if (!progress) {
    el.progress.textContent = "";
    return;
  }
  const perAnnotator = Object.entries(progress.annotators)
    .sort(([a], [b]) => a.localeCompare(b))
    .map(([id, count]) => `${id}: ${count}`)
    .join(", ");
  el.progress.textContent =
    `${progress.consolidated_frames}/${progress.total_frames} frames annotated` +
    (perAnnotator ? ` (${perAnnotator})` : "");
}

async function renderChart(): Promise<void> {
  try {
    const table = await api.association();
    el.chart.replaceChildren(
      ...chartGroups(table).map((group) => {
        const column = document.createElement("div");
        column.className = "chart-group";
        const title = document.createElement("h3");
        title.textContent = group.category;
        column.appendChild(title);
        for (const bar of group.bars) {
          const row = document.createElement("div");
          row.className = "chart-row";
          const name = document.createElement("span");
          name.textContent = `AU${bar.auId}`;
          const track = document.createElement("div");
          track.className = "chart-track";
          const fill = document.createElement("div");
          fill.className = "chart-fill";
          fill.style.width = `${bar.percentage ?? 0}%`;
          fill.title = bar.label;
          track.appendChild(fill);
          const value = document.createElement("span");
          value.className = "chart-value";
          value.textContent = bar.label;
          row.append(name, track, value);
          column.appendChild(row);
        }
        return column;
      }),
    );
  } catch {
    // analytics are best-effort in the console; leave the last chart up
  }
}

function renderAll(): void {
  renderBanner();
  renderFrame();
  renderProgress();
}

async function advance(): Promise<void> {
  await controller.loadNext();
  renderAll();
}

async function submit(): Promise<void> {
  if (!state.canSubmit) {
    return;
  }
  await controller.submit();
  renderAll();
  void renderChart();
}

el.start.onclick = async () => {
  state.setAnnotator(el.annotator.value);
  if (!state.ready) {
    return;
  }
  el.annotator.disabled = true;
  el.start.disabled = true;
  await controller.refreshProgress().catch(() => undefined);
  await advance();
  void renderChart();
};

el.submit.onclick = () => void submit();
el.retry.onclick = () => void advance();

document.addEventListener("keydown", (event) => {
  const target = event.target as HTMLElement | null;
  if (isTypingTarget(target?.tagName, target?.isContentEditable ?? false)) {
    return;
  }
  const action = actionForKey(event.key);
  if (action.kind === "submit") {
    event.preventDefault();
    void submit();
  } else if (action.kind === "toggle" && state.frame) {
    const au = auForSlot(state.frame.au_schema, action.slot);
    if (au !== null) {
      state.toggle(au);
      renderFrame();
    }
  }
});

setInterval(() => {
  if (state.ready) {
    void controller.refreshProgress().then(renderProgress).catch(() => undefined);
  }
}, 5000);
