/** DOM wiring for the mask editor page: canvas painting, the Fill button
 * and ranked gallery, and the attention probe overlay.  All editor logic
 * lives in the framework-free modules this file composes. */

import { ApiClient } from "./api.js";
import { EditorState } from "./editor-state.js";
import { renderOverlayRgba } from "./heatmap.js";
import { Point } from "./mask-layer.js";
import type { ProbeResponse } from "./types.js";

const api = new ApiClient("");
const editor = new EditorState(api);

const canvas = document.getElementById("editor-canvas") as HTMLCanvasElement;
const ctx = canvas.getContext("2d") as CanvasRenderingContext2D;
const fileInput = document.getElementById("image-file") as HTMLInputElement;
const modelSelect = document.getElementById("model-select") as HTMLSelectElement;
const brushInput = document.getElementById("brush-size") as HTMLInputElement;
const modeButton = document.getElementById("mask-mode") as HTMLButtonElement;
const fillButton = document.getElementById("fill") as HTMLButtonElement;
const undoButton = document.getElementById("undo") as HTMLButtonElement;
const clearButton = document.getElementById("clear-mask") as HTMLButtonElement;
const probeToggle = document.getElementById("probe-toggle") as HTMLInputElement;
const opacityInput = document.getElementById("overlay-opacity") as HTMLInputElement;
const galleryDiv = document.getElementById("gallery") as HTMLDivElement;
const bannerDiv = document.getElementById("banner") as HTMLDivElement;

let baseImage: ImageBitmap | null = null;
let probe: ProbeResponse | null = null;
let stroke: Point[] = [];
let dragStart: Point | null = null;

function canvasPoint(event: PointerEvent): Point {
  const rect = canvas.getBoundingClientRect();
  return {
    x: ((event.clientX - rect.left) * canvas.width) / rect.width,
    y: ((event.clientY - rect.top) * canvas.height) / rect.height,
  };
}

function redraw(): void {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (baseImage !== null) {
    ctx.drawImage(baseImage, 0, 0);
  }
  const mask = editor.mask;
  if (mask !== null) {
    const tint = ctx.createImageData(mask.width, mask.height);
    for (let i = 0; i < mask.data.length; i++) {
      if (mask.data[i] === 0) {
        const o = i * 4;
        tint.data[o] = 40;
        tint.data[o + 1] = 40;
        tint.data[o + 2] = 40;
        tint.data[o + 3] = 200;
      }
    }
    ctx.putImageData(tint, 0, 0);
    if (baseImage !== null) {
      ctx.globalCompositeOperation = "destination-over";
      ctx.drawImage(baseImage, 0, 0);
      ctx.globalCompositeOperation = "source-over";
    }
  }
  if (probe !== null && probeToggle.checked) {
    const rgba = renderOverlayRgba(probe, canvas.width, canvas.height, {
      opacity: Number(opacityInput.value),
    });
    const overlay = new ImageData(rgba, canvas.width, canvas.height);
    createImageBitmap(overlay).then((bitmap) => {
      ctx.drawImage(bitmap, 0, 0);
    });
  }
}

function renderBanner(): void {
  bannerDiv.textContent = editor.banner ?? "";
  bannerDiv.style.display = editor.banner === null ? "none" : "block";
}

function renderGallery(): void {
  galleryDiv.replaceChildren();
  editor.gallery.forEach((entry, index) => {
    const cell = document.createElement("figure");
    cell.className = "thumb" + (editor.selected === index ? " selected" : "");
    const img = document.createElement("img");
    img.src = api.imageUrl(entry.ref);
    img.alt = `sample ${index + 1}`;
    const caption = document.createElement("figcaption");
    caption.textContent = entry.score.toFixed(4);
    cell.append(img, caption);
    cell.addEventListener("click", () => {
      editor.selectSample(index);
      void showSample(entry.ref);
      renderGallery();
    });
    galleryDiv.appendChild(cell);
  });
}

async function showSample(ref: string): Promise<void> {
  const response = await fetch(api.imageUrl(ref));
  baseImage = await createImageBitmap(await response.blob());
  redraw();
}

fileInput.addEventListener("change", async () => {
  const file = fileInput.files?.[0];
  if (file === undefined) {
    return;
  }
  await editor.loadImage(file);
  baseImage = await createImageBitmap(file);
  probe = null;
  canvas.width = editor.imageWidth;
  canvas.height = editor.imageHeight;
  renderGallery();
  renderBanner();
  redraw();
});

modeButton.addEventListener("click", () => {
  editor.maskMode = editor.maskMode === "free-form" ? "rectangle" : "free-form";
  modeButton.textContent = `Mask Type: ${editor.maskMode}`;
});

brushInput.addEventListener("input", () => {
  editor.brushSize = Number(brushInput.value);
});

canvas.addEventListener("pointerdown", (event) => {
  if (editor.mask === null) {
    return;
  }
  const p = canvasPoint(event);
  if (probeToggle.checked) {
    void editor
      .probeAttention(p.y, p.x)
      .then((result) => {
        probe = result;
        redraw();
      })
      .catch(() => {
        // clicks outside the image or non-SLTA models: ignore
      });
    return;
  }
  canvas.setPointerCapture(event.pointerId);
  if (editor.maskMode === "rectangle") {
    dragStart = p;
  } else {
    stroke = [p];
  }
});

canvas.addEventListener("pointermove", (event) => {
  if (stroke.length > 0) {
    stroke.push(canvasPoint(event));
  }
});

canvas.addEventListener("pointerup", (event) => {
  if (editor.mask === null) {
    return;
  }
  const p = canvasPoint(event);
  if (dragStart !== null) {
    editor.drawRectangle(dragStart, p);
    dragStart = null;
  } else if (stroke.length > 0) {
    editor.drawStroke(stroke);
    editor.mask.endGesture();
    stroke = [];
  }
  redraw();
});

undoButton.addEventListener("click", () => {
  if (editor.mask !== null && editor.undo()) {
    redraw();
  }
});

clearButton.addEventListener("click", () => {
  editor.mask?.clear();
  redraw();
});

fillButton.addEventListener("click", async () => {
  if (editor.mask === null) {
    return;
  }
  editor.model = modelSelect.value;
  fillButton.disabled = true;
  try {
    await editor.fill();
  } finally {
    fillButton.disabled = false;
  }
  renderGallery();
  renderBanner();
  if (editor.gallery.length > 0) {
    void showSample(editor.gallery[editor.selected ?? 0].ref);
  }
});

probeToggle.addEventListener("change", redraw);
opacityInput.addEventListener("input", redraw);

void api.listModels().then((models) => {
  modelSelect.replaceChildren();
  for (const model of models) {
    const option = document.createElement("option");
    option.value = model.name;
    option.textContent = `${model.name} (${model.kind}, ${model.input_size}px)`;
    modelSelect.appendChild(option);
  }
});
