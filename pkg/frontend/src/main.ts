import { AnnotatorApp } from "./app.js";

const app = new AnnotatorApp("");
void app.start();
