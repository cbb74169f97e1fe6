/** Keyboard shortcuts for triage: flagging, relabeling, navigation. */

export interface ShortcutHandlers {
  flagOutlier: () => void;
  relabelPrompt: () => void;
  nameClusterPrompt: () => void;
  nextPage: () => void;
  clearSelection: () => void;
}

export const SHORTCUTS: Record<string, keyof ShortcutHandlers> = {
  x: "flagOutlier",
  r: "relabelPrompt",
  n: "nameClusterPrompt",
  j: "nextPage",
  Escape: "clearSelection",
};

export function dispatchKey(key: string, handlers: ShortcutHandlers): boolean {
  const action = SHORTCUTS[key];
  if (!action) return false;
  handlers[action]();
  return true;
}

export function bindShortcuts(target: EventTarget, handlers: ShortcutHandlers): void {
  target.addEventListener("keydown", (event) => {
    const keyboard = event as KeyboardEvent;
    const element = keyboard.target as HTMLElement | null;
    if (element && (element.tagName === "INPUT" || element.tagName === "TEXTAREA")) {
      return; // never steal keys from form fields
    }
    if (dispatchKey(keyboard.key, handlers)) {
      keyboard.preventDefault();
    }
  });
}
