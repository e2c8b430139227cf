// Keyboard shortcuts: digits 1-9 and 0 toggle the first ten AUs in grid
// order, q/w the remaining two, Enter submits. Keys typed into form fields
// are left alone.
import type { AuSchemaEntry } from "./api.js";

export type KeyAction =
  | { kind: "toggle"; slot: number }
  | { kind: "submit" }
  | { kind: "none" };

const DIGIT_SLOTS: Record<string, number> = {
  "1": 0, "2": 1, "3": 2, "4": 3, "5": 4, "6": 5, "7": 6, "8": 7, "9": 8, "0": 9,
  q: 10, w: 11,
};

export function actionForKey(key: string): KeyAction {
  if (key === "Enter") {
    return { kind: "submit" };
  }
  const slot = DIGIT_SLOTS[key];
  if (slot !== undefined) {
    return { kind: "toggle", slot };
  }
  return { kind: "none" };
}

/** AU id occupying a toggle-grid slot, or null past the end. */
export function auForSlot(schema: AuSchemaEntry[], slot: number): number | null {
  return slot >= 0 && slot < schema.length ? schema[slot].au_id : null;
}

export function isTypingTarget(tagName: string | undefined, editable: boolean): boolean {
  if (editable) {
    return true;
  }
  return tagName === "INPUT" || tagName === "SELECT" || tagName === "TEXTAREA";
}
